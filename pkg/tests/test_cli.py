import json

import numpy as np
import pytest
import yaml

from discrimq.cli import SUBCOMMANDS, run_command
from discrimq.config import METHODS, ConfigError, SYNTHETIC_DEFAULTS, load_config
from discrimq.corpus import Corpus, EvalPair, Reference, RegionRecord
from discrimq.pipeline import emit_report, hard_subset

TINY = ["--set", "world.n_images=60", "--set", "world.n_pairs=60", "--set", "attributes.epochs=5",
        "--set", "vqa.epochs=2", "--set", "qgen.epochs=2", "--set", "baseline.epochs=2",
        "--set", "selector.grid=[0.0,1.0]", "--set", "retrieval.k=5"]


def status(capsys):
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = load_config(p, env={})
    assert cfg.data == SYNTHETIC_DEFAULTS


def test_unknown_key_is_named(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("selector:\n  gamma: 1\n")
    with pytest.raises(ConfigError, match="selector.gamma"):
        load_config(p, env={})


def test_echo_roundtrip(tmp_path):
    cfg = load_config(None, {"paths": {"out": str(tmp_path)}, "selector": {"alpha": 0.0}}, env={})
    path = cfg.echo("select")
    again = load_config(path, env={})
    assert again == cfg and again.get("selector.alpha") == 0.0


def test_env_overrides_output_dir(tmp_path):
    cfg = load_config(None, {"paths": {"out": "elsewhere"}}, env={"DISCRIMQ_OUT": str(tmp_path)})
    assert cfg.out_dir == tmp_path


def test_validation_errors():
    for bad in ({"method": "nope"}, {"seed": True}, {"selector": {"beta": -1}},
                {"corpus": {"split_ratios": [0.5, 0.5, 0.5]}}, {"selector": {"min_gain": -0.1}}):
        with pytest.raises(ConfigError):
            load_config(None, bad, env={})
    with pytest.raises(ConfigError, match="paths.corpus"):
        load_config(None, {"profile": "real", "paths": {"corpus": "/no/such/dir"}}, env={})


def test_missing_config_exits_1_with_path(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    assert run_command(["synth", "--config", str(missing)]) == 1
    s = status(capsys)
    assert not s["ok"] and str(missing) in s["message"]


def test_unknown_subcommand_exits_1(capsys):
    assert run_command(["frobnicate"]) == 1
    assert status(capsys)["error"] == "usage"
    assert run_command([]) == 1
    status(capsys)


def test_alpha_flag_is_echoed(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("DISCRIMQ_OUT", raising=False)
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text(yaml.safe_dump({"selector": {"alpha": 2.0}}))
    out = tmp_path / "run"
    # select fails without trained models, but the echoed config is written first
    code = run_command(["select", "--config", str(cfg_file), "--out", str(out), "--alpha", "0"])
    status(capsys)
    assert code != 0
    echoed = yaml.safe_load((out / "config.select.yaml").read_text())
    assert echoed["selector"]["alpha"] == 0


def test_gradcheck_command(tmp_path, capsys):
    assert run_command(["gradcheck", "--profile", "synthetic", "--out", str(tmp_path)]) == 0
    s = status(capsys)
    assert s["ok"] and s["result"]["max_rel_error"] < 1e-4
    assert set(s["result"]["per_model"]) == {"attr", "vqa", "qgen", "baseline"}


def test_tiny_pipeline_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("DISCRIMQ_OUT", raising=False)
    common = ["--out", str(tmp_path), "--seed", "3", *TINY]
    for cmd in ("synth", "ingest", "train-attr", "train-vqa", "train-qgen", "train-baseline", "select"):
        assert run_command([cmd, *common]) == 0, status(capsys)
        assert status(capsys)["ok"]
    for m in METHODS:
        assert run_command(["generate", "--method", m, *common]) == 0, status(capsys)
        status(capsys)
        for hard in ([], ["--hard"]):
            assert run_command(["evaluate", "--method", m, *hard, *common]) == 0, status(capsys)
            status(capsys)
    assert run_command(["report", *common]) == 0
    assert status(capsys)["result"]["report"] == list(METHODS)
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "method,delta_bleu,bleu,n" and [r.split(",")[0] for r in rows[1:]] == list(METHODS)
    assert (tmp_path / "report_hard.csv").exists()
    for cmd in SUBCOMMANDS:
        if cmd != "gradcheck":
            assert (tmp_path / f"config.{cmd}.yaml").exists()
    first = json.loads((tmp_path / "pairs_scored.jsonl").read_text().splitlines()[0])
    assert set(first) == {"pair_id", "top"} and len(first["top"]) == 5
    assert set(first["top"][0]) == {"i", "j", "att_i", "att_j", "contrast", "q_sim", "v_sim", "score"}


def test_report_order_and_determinism(tmp_path):
    scores = [{"method": m, "delta_bleu": 0.1 * k, "bleu": 0.2, "n": 4}
              for k, m in enumerate(("acqg_full", "retrieval", "cnn_lstm"))]
    emit_report(scores, tmp_path / "a")
    emit_report(scores[::-1], tmp_path / "b")
    a = (tmp_path / "a" / "report.csv").read_bytes()
    assert a == (tmp_path / "b" / "report.csv").read_bytes()
    assert [r.split(",")[0] for r in a.decode().splitlines()[1:]] == ["retrieval", "cnn_lstm", "acqg_full"]
    emit_report(scores[:1], tmp_path / "c")
    assert len((tmp_path / "c" / "report.csv").read_text().splitlines()) == 2
    with pytest.raises(ConfigError):
        emit_report([], tmp_path / "d")


def test_hard_subset_rule():
    def region(rid, cat):
        return RegionRecord(rid, rid, (0, 0, 1, 1), (2, 2), np.zeros(1), np.zeros(1), category=cat)

    corpus = Corpus({f"r{k}": region(f"r{k}", "dog" if k < 6 else "cat") for k in range(10)})
    pairs = []
    # positive share per pair: dog 1/4, 3/4, 2/4 ; cat 2/2, 1/2
    for pid, a, n_pos, n in (("d0", "r0", 1, 4), ("d1", "r2", 3, 4), ("d2", "r4", 2, 4),
                             ("c0", "r6", 2, 2), ("c1", "r8", 1, 2)):
        refs = [Reference("q", "strong_pos")] * n_pos + [Reference("q", "neg")] * (n - n_pos)
        pairs.append(EvalPair(pid, a, a, refs))
    assert [p.pair_id for p in hard_subset(pairs, corpus)] == ["d0", "d2", "c1"]
