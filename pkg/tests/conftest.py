import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from discrimq.config import load_config  # noqa: E402
from discrimq.pipeline import Run, run_all  # noqa: E402

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def full_synthetic_run(out: Path, seed: int = 7):
    """The default synthetic profile, every stage and every method."""
    cfg = load_config(None, {"paths": {"out": str(out)}, "seed": seed}, env={})
    started = time.perf_counter()
    status = run_all(cfg)
    return SimpleNamespace(cfg=cfg, status=status, seconds=time.perf_counter() - started, run=Run(cfg))


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    return full_synthetic_run(tmp_path_factory.mktemp("synthetic_a"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
