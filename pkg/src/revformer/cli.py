"""Command-line entry point: ``revformer {verify|train|bench|info}``."""

import argparse
import sys
from pathlib import Path
from typing import Sequence

import pandas as pd

from revformer import __version__
from revformer.analytics import cost_report, published_regression
from revformer.bench import run_bench
from revformer.config import PRESETS, RunConfig, load_run_config, settings
from revformer.train import train
from revformer.utils import ensure_dir, setup_logging, write_table
from revformer.verify import SUITE_FUNCTIONS, run_verify

logger = setup_logging(settings.log_level)

INFO_COLUMNS = [
    "model",
    "params",
    "flops",
    "act_mem_cached",
    "act_mem_reversible",
    "recompute_flops",
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revformer", description="Reversible vision transformer training engine"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--config",
            default="tiny_vit",
            help=f"TOML run file or preset name ({', '.join(sorted(PRESETS))})",
        )
        p.add_argument("--seed", type=int, default=None, help="Override the run seed")
        p.add_argument("--out", type=Path, default=None, help="Output directory")

    verify = sub.add_parser("verify", help="Run verification suites")
    common(verify)
    verify.add_argument(
        "--suite",
        action="append",
        choices=list(SUITE_FUNCTIONS),
        help="Suite to run (repeatable); defaults to the config's list",
    )

    train_cmd = sub.add_parser("train", help="Train on the synthetic task")
    common(train_cmd)
    train_cmd.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")
    train_cmd.add_argument("--steps", type=int, default=None, help="Override train.steps")

    bench = sub.add_parser("bench", help="Throughput and memory sweep")
    common(bench)

    info = sub.add_parser("info", help="Print parameter, MAC and memory costs")
    common(info)
    info.add_argument(
        "--regression",
        action="store_true",
        help="Also compare the zoo against the published figures",
    )
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def output_dir(args: argparse.Namespace) -> Path:
    return ensure_dir(args.out if args.out is not None else settings.get_output_dir())


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    logger.info(f"Verifying with seed {cfg.seed}")
    return run_verify(cfg, args.suite, output_dir(args))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args)
    result = train(cfg, out_dir=out, resume=args.resume, steps=args.steps)
    logger.info(f"Test accuracy: {result.metrics['test_accuracy']:.4f}")
    logger.info(f"Checkpoint saved to {result.checkpoint_path}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = output_dir(args)
    frame = run_bench(cfg.bench, seed=cfg.seed, out_dir=out)
    print(frame.to_string(index=False))
    logger.info(f"Bench results saved to {out / 'bench.csv'}")
    return 0


def cmd_info(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    report = cost_report(cfg.model)
    name = args.config if args.config in PRESETS else cfg.model.arch
    print(name)
    print(f"  params              {report.params / 1e6:10.2f} M")
    print(f"  forward MACs        {report.flops / 1e9:10.2f} G")
    print(f"  recompute MACs      {report.recompute_flops / 1e9:10.2f} G")
    print(f"  act. mem cached     {report.act_mem_cached / 2**20:10.2f} MiB/img")
    print(f"  act. mem reversible {report.act_mem_reversible / 2**20:10.2f} MiB/img")

    out = output_dir(args)
    write_table([{"model": name, **report.as_dict()}], out / "info.csv", INFO_COLUMNS)
    if args.regression:
        table: pd.DataFrame = published_regression()
        print(table.to_string(index=False))
        table.to_csv(out / "regression.csv", index=False)
        if not table["passed"].all():
            return 1
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "train": cmd_train,
    "bench": cmd_bench,
    "info": cmd_info,
}


def main(argv: Sequence[str] | None = None) -> None:
    """Main entry point for the ``revformer`` command."""
    args = build_parser().parse_args(argv)
    try:
        sys.exit(COMMANDS[args.command](args))
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
