"""``discrimq`` command line: one subcommand per pipeline stage.

Every invocation prints exactly one JSON status line on stdout. Exit codes:
0 success, 1 invalid input or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import yaml

from . import nn, pipeline
from .config import METHODS, ConfigError, _merge, dotted_update, load_config
from .corpus import DataError, ParseError, SchemaError
from .synth import ConfigError as WorldError

SUBCOMMANDS = ("synth", "ingest", "train-attr", "train-vqa", "train-qgen", "train-baseline",
               "select", "generate", "evaluate", "gradcheck", "report")

GRADCHECK_TOL = 1e-4

_VALIDATION = (ConfigError, WorldError, ParseError, SchemaError, DataError, yaml.YAMLError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--profile", choices=("synthetic", "real"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--corpus", help="directory with regions.jsonl and pairs.jsonl")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set qgen.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--alpha", type=float)
    sel.add_argument("--beta", type=float)
    sel.add_argument("--top-k", type=int)
    sel.add_argument("--mode", choices=("exact", "pruned"))

    beam = argparse.ArgumentParser(add_help=False)
    beam.add_argument("--width", type=int)
    beam.add_argument("--max-len", type=int)
    beam.add_argument("--no-tune", action="store_true", help="use alpha/beta as given")

    meth = argparse.ArgumentParser(add_help=False)
    meth.add_argument("--method", choices=METHODS)

    parser = _Parser(prog="discrimq", description="Discriminative question generation for region pairs.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=_Parser)
    sub.required = True
    parents = {
        "select": [common, sel],
        "generate": [common, sel, beam, meth],
        "evaluate": [common, meth],
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=parents.get(name, [common]))
        if name == "evaluate":
            p.add_argument("--hard", action="store_true",
                           help="per category, keep the half with the lowest positive-reference ratio")
    return parser


def _overrides(args) -> dict:
    out: dict = {}

    def put(dotted, value):
        nonlocal out
        if value is not None:
            out = _merge(out, dotted_update(dotted, value), strict=False)

    put("profile", args.profile)
    put("seed", args.seed)
    put("paths.out", args.out)
    put("paths.corpus", args.corpus)
    for name, key in (("alpha", "selector.alpha"), ("beta", "selector.beta"), ("top_k", "selector.top_k"),
                      ("mode", "selector.mode"), ("width", "beam.width"), ("max_len", "beam.max_len"),
                      ("method", "method")):
        put(key, getattr(args, name, None))
    if getattr(args, "no_tune", False):
        put("selector.tune", False)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        put(key.strip(), yaml.safe_load(raw))
    return out


def _dispatch(args, cfg) -> dict:
    cmd = args.command
    if cmd == "gradcheck":
        errors = pipeline.gradient_checks(cfg.seed)
        worst = max(errors.values())
        return {"max_rel_error": worst, "per_model": errors, "tolerance": GRADCHECK_TOL,
                "passed": worst < GRADCHECK_TOL}
    if cmd == "generate":
        return pipeline.stage_generate(cfg)
    if cmd == "evaluate":
        return pipeline.stage_evaluate(cfg, hard=args.hard)
    if cmd == "report":
        return pipeline.stage_report(cfg)
    return pipeline.STAGES[cmd](cfg)


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.perf_counter()
    status: dict = {"command": argv[0] if argv else None}
    code = 0
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, _overrides(args))
        cfg.echo(args.command)
        result = _dispatch(args, cfg)
        status.update(ok=True, out=str(cfg.out_dir), result=result)
        if args.command == "gradcheck" and not result["passed"]:
            status["ok"] = False
            code = 2
    except UsageError as exc:
        sys.stderr.write(str(exc))
        status.update(ok=False, error="usage", message=str(exc).splitlines()[0])
        code = 1
    except _VALIDATION as exc:
        status.update(ok=False, error=type(exc).__name__, message=str(exc))
        code = 1
    except (nn.NumericError, nn.ShapeError, nn.StateError, OSError, ArithmeticError, RuntimeError) as exc:
        status.update(ok=False, error=type(exc).__name__, message=str(exc))
        code = 2
    except Exception as exc:  # noqa: BLE001 - the status line must still be printed
        logging.getLogger(__name__).exception("unexpected failure")
        status.update(ok=False, error=type(exc).__name__, message=str(exc))
        code = 2
    status["seconds"] = round(time.perf_counter() - started, 3)
    print(json.dumps(status, sort_keys=True, default=_jsonable))
    return code


def _jsonable(obj):
    if hasattr(obj, "item"):
        return obj.item()
    return str(obj)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
