"""Command-line entry points.

Subcommands: gen (synthetic data), train, run (sequence inference),
eval (score predictions against ground truth), selftest (oracle
suites). Exit codes: 0 success, 1 usage, 2 data/config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import List, Optional

from .config import EngineConfig
from .errors import ConfigError, DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the convention here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semvos", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render synthetic sequences from a spec file")
    g.add_argument("--spec", required=True, help="JSON spec (object or list of objects)")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train weights on a directory of sequences")
    t.add_argument("--data", required=True, help="directory holding sequence subdirs")
    t.add_argument("--config", required=True, help="engine config JSON")
    t.add_argument("--steps", required=True, type=int)
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--freeze-vit", action="store_true",
                   help="exclude semantic encoder weights from updates")
    t.add_argument("--log", default=None,
                   help="loss log path (default: checkpoint path + .loss.jsonl)")

    r = sub.add_parser("run", help="propagate a first-frame annotation")
    r.add_argument("--manifest", required=True, help="sequence manifest JSON")
    r.add_argument("--ckpt", required=True, help="weights checkpoint")
    r.add_argument("--config", required=True, help="engine config JSON")
    r.add_argument("--out", required=True, help="prediction output directory")
    r.add_argument("--report", default=None, help="also write a metrics report here")

    e = sub.add_parser("eval", help="score prediction masks against ground truth")
    e.add_argument("--pred", required=True, help="directory of predicted PGM masks")
    e.add_argument("--gt", required=True, help="directory of ground-truth PGM masks")
    e.add_argument("--report", required=True, help="output report JSON")
    e.add_argument("--include-first-frame", action="store_true",
                   help="score the annotated first frame too")

    sub.add_parser("selftest", help="run the built-in oracle suites")
    return p


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def cmd_gen(args) -> int:
    from .synthetic import SyntheticSpec, gen_synthetic
    raw = _load_json(args.spec)
    specs = raw if isinstance(raw, list) else [raw]
    for item in specs:
        if not isinstance(item, dict):
            raise DataError(f"spec entries must be JSON objects, got {type(item).__name__}")
        manifest = gen_synthetic(SyntheticSpec.from_dict(item), args.out)
        print(manifest)
    return EXIT_OK


def _find_manifests(data_dir: str) -> List[str]:
    direct = os.path.join(data_dir, "manifest.json")
    found = sorted(glob.glob(os.path.join(data_dir, "*", "manifest.json")))
    if os.path.exists(direct):
        found.insert(0, direct)
    if not found:
        raise DataError(f"no manifest.json files under {data_dir}")
    return found


def cmd_train(args) -> int:
    from .engine import SequenceManifest
    from .training import TrainHyper, train
    from .weights import ModelWeights
    cfg = EngineConfig.from_dict(_load_json(args.config))
    if args.freeze_vit:
        cfg.freeze_vit = True
    manifests = [SequenceManifest.load(p) for p in _find_manifests(args.data)]
    hyper = TrainHyper(steps=args.steps)
    w = ModelWeights.init(cfg)
    log_path = args.log or args.out + ".loss.jsonl"
    losses = train(manifests, cfg, w, hyper, log_path=log_path)
    w.save(args.out)
    print(json.dumps({"steps": len(losses),
                      "initial_loss": losses[0] if losses else None,
                      "final_loss": losses[-1] if losses else None,
                      "checkpoint": args.out}))
    return EXIT_OK


def cmd_run(args) -> int:
    from .engine import SequenceManifest, run_sequence
    from .weights import ModelWeights
    cfg = EngineConfig.from_dict(_load_json(args.config))
    w = ModelWeights.load(args.ckpt)
    if w.cfg.architecture() != cfg.architecture():
        diff = [k for k in cfg.ARCHITECTURE_FIELDS
                if w.cfg.architecture()[k] != cfg.architecture()[k]]
        raise ConfigError(f"checkpoint architecture disagrees with --config on {diff}")
    man = SequenceManifest.load(args.manifest)
    outputs, report, _ = run_sequence(man, cfg, w, out_dir=args.out)
    if args.report:
        if report is None:
            raise DataError(f"{args.manifest} carries no GT masks; cannot write a report")
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    summary = {"frames": len(outputs), "out": args.out}
    if report is not None:
        summary["JF"] = report.to_dict()["JF"]
    print(json.dumps(summary))
    return EXIT_OK


def _read_mask_dir(path: str) -> list:
    from . import imagefiles
    files = sorted(glob.glob(os.path.join(path, "*.pgm")))
    if not files:
        raise DataError(f"no .pgm masks in {path}")
    return [imagefiles.read_pgm(f) for f in files]


def cmd_eval(args) -> int:
    from .metrics import evaluate_sequence
    preds = _read_mask_dir(args.pred)
    gts = _read_mask_dir(args.gt)
    report = evaluate_sequence(preds, gts,
                               ignore_first_frame=not args.include_first_frame)
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    report = selftest.run_suites()
    selftest.print_report(report, stream=sys.stderr)
    print(json.dumps(report, indent=2))
    if not report["passed"]:
        raise NumericalError("one or more verification suites failed")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "run": cmd_run,
            "eval": cmd_eval, "selftest": cmd_selftest}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigError) as exc:
        print(f"semvos: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"semvos: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
