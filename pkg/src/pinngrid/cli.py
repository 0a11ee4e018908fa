"""Command line entry point: ``python -m pinngrid <command>``.

Exit codes: 0 success, 1 failure (including bad usage), 2 an acceptance gate failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline

EXIT_OK, EXIT_FAIL, EXIT_GATE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="pinngrid", description="Physics-informed grid surrogate study.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate and write all datasets")
    t = sub.add_parser("train", parents=[common], help="fit one model and write its checkpoint")
    t.add_argument("model", choices=["lr", "rf", "gbt", "pinn"])
    t.add_argument("--dataset", choices=["generative", "agent"], default="generative",
                   help="training set for baselines (ignored by pinn)")
    e = sub.add_parser("eval", parents=[common], help="evaluate saved models and write reports")
    e.add_argument("--check", action="store_true", help="evaluate acceptance gates and set the exit code")
    r = sub.add_parser("reproduce", parents=[common], help="run the whole study")
    r.add_argument("--check", action="store_true", help="evaluate acceptance gates and set the exit code")
    r.add_argument("--save-models", action="store_true", help="also write baseline model files")
    return p


def resolve_config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.from_json(args.config) if args.config else pipeline.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if cfg.case is not None and not Path(cfg.case).exists():
        raise FileNotFoundError(f"case file not found: {cfg.case}")
    return cfg


def _report_gates(cfg, res) -> int:
    case = cfg.load_case()
    soc_max = case.storage[0].soc_max if case.storage else 1.0
    gates = pipeline.acceptance_gates(res, soc_max)
    pipeline.write_gates(gates, Path(cfg.out) / "acceptance.json")
    for g in gates:
        print(f"{'PASS' if g.passed else 'FAIL'}  {g.name}  [{g.detail}]")
    return EXIT_OK if all(g.passed for g in gates) else EXIT_GATE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        if args.command == "gen-data":
            dsets = pipeline.cmd_gen_data(cfg, args.jobs)
            for name, ds in dsets.items():
                print(f"{name}: {len(ds)} samples ({ds.discarded} discarded)")
            return EXIT_OK
        if args.command == "train":
            path = pipeline.cmd_train(cfg, args.model, args.dataset, args.jobs)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "eval":
            res = pipeline.cmd_eval(cfg)
        else:
            res = pipeline.cmd_reproduce(cfg, args.jobs, args.save_models)
        print(f"reports written to {Path(cfg.out) / 'reports'}")
        return _report_gates(cfg, res) if args.check else EXIT_OK
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        print(f"pinngrid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
