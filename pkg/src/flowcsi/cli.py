"""Command-line entry points: gen-data, train, eval, analyze-cells, verify-theory.

Exit codes: 0 all checks/stages succeeded, 1 a verification check
failed, 2 configuration or dependency error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import FlowCsiError, InvalidConfigError, MissingDependencyError
from .experiments import (ExperimentConfig, Workspace, analyze_cells,
                          eval_methods, gen_data, train_method, verify_theory)


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        config = ExperimentConfig()
    else:
        config = ExperimentConfig.from_json(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    for name in ("n_step", "sigma0", "ema_decay"):
        if getattr(args, name.replace("-", "_"), None) is not None:
            config = replace(config, **{name: getattr(args, name)})
    return config


def _bits_values(config: ExperimentConfig, args) -> list:
    return [args.bits] if getattr(args, "bits", None) else list(config.bits_list)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcsi",
        description="Finite-rate CSI feedback experiments for MU-MIMO zero-forcing")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--out", type=Path, default=Path("runs/default"),
                       help="output directory")

    p = sub.add_parser("gen-data", help="build and persist the channel dataset")
    common(p)

    p = sub.add_parser("train", help="train one method at one or all bit budgets")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--mode", choices=["refiner", "direct"], default=None,
                   help="informational; the method name fixes the mode")
    p.add_argument("--n-step", dest="n_step", type=int, default=None)
    p.add_argument("--sigma0", type=float, default=None)
    p.add_argument("--ema-decay", dest="ema_decay", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate methods over the configured axes")
    common(p)
    p.add_argument("--method", action="append", default=None,
                   help="repeatable; defaults to the configured method list")

    p = sub.add_parser("analyze-cells", help="per-feedback-cell geometry reports")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--bits", type=int, default=None)

    p = sub.add_parser("verify-theory", help="run the self-contained theory checks")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        ws = Workspace(args.out)
        if args.command == "gen-data":
            ds = gen_data(config, ws)
            print(f"dataset: {ds.train.shape[0]} train / {ds.test.shape[0]} test / "
                  f"{ds.multiuser_sets.shape[0]} sets -> {ws.dataset_path}")
            return 0
        if args.command == "train":
            for bits in _bits_values(config, args):
                path = train_method(config, args.method, bits, ws)
                print(f"trained {args.method} at B={bits} -> {path}")
            return 0
        if args.command == "eval":
            methods = args.method if args.method else None
            records, skipped = eval_methods(config, ws, methods=methods)
            print(f"wrote {len(records)} rows to {ws.metrics_path}"
                  + (f" ({skipped} singular sets skipped)" if skipped else ""))
            return 0
        if args.command == "analyze-cells":
            for bits in _bits_values(config, args):
                records, below = analyze_cells(config, args.method, bits, ws)
                print(f"{args.method} B={bits}: {len(records)} cells analyzed, "
                      f"{below} below min count -> {ws.cells_path(args.method, bits)}")
            return 0
        if args.command == "verify-theory":
            results = verify_theory()
            failed = 0
            for r in results:
                status = "PASS" if r.passed else "FAIL"
                print(f"[{status}] {r.name}: {r.detail}")
                failed += 0 if r.passed else 1
            return 0 if failed == 0 else 1
    except (InvalidConfigError, MissingDependencyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FlowCsiError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
