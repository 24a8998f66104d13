"""Command line entry point: ``ganshield <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .autodiff import NonFiniteError
from .checkpoint import CheckpointFormatError
from .data import IdxFormatError
from .defense import CalibrationError, CleaningError
from .harness import config as config_mod
from .harness import experiments as ex
from .harness.config import ConfigError
from .harness.reports import BUILD_ID
from .nets import TrainingError

log = logging.getLogger("ganshield")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

REPORTS = {
    "attack": (ex.run_attacks, "attack.csv"),
    "detect": (ex.run_detect, "detect.csv"),
    "clean": (ex.run_clean, "clean.csv"),
    "table1": (ex.run_table1, "table1.csv"),
    "table2": (ex.run_table2, "table2.csv"),
    "violin": (ex.run_violin_export, "violin.csv"),
    "gan-sweep": (ex.run_gan_quality_sweep, "gan_sweep.csv"),
}
COMMANDS = ("train-classifier", "train-gan", *REPORTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--dataset", help="'two-gaussians' or a path to an IDX image file")
        p.add_argument("--labels", help="IDX label file to go with --dataset PATH")
        p.add_argument("--checkpoint", type=Path, help="GAN checkpoint file or directory of gan-step*.gshd")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config entry")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> config_mod.ExperimentConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(config_mod.parse_text(item))
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.labels is not None:
        overrides["dataset.labels"] = args.labels
    if args.checkpoint is not None:
        overrides["gan.checkpoint"] = str(args.checkpoint)
    return config_mod.load(args.config, seed=args.seed, overrides=overrides)


def run(args) -> list[Path]:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    written = [cfg.write(out)]
    if args.command == "train-classifier":
        written.append(ex.save_classifier(cfg, out))
    elif args.command == "train-gan":
        written += ex.save_gan(cfg, out)
    else:
        fn, filename = REPORTS[args.command]
        report = fn(cfg)
        written.append(report.write(out / filename))
        if not report.provenance:
            side = out / (filename + ".provenance")
            side.write_text(f"config_hash = {report.config_hash}\nbuild_id = {BUILD_ID}\n")
            written.append(side)
    return written


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, CalibrationError)):
        return EXIT_CONFIG
    if isinstance(exc, (TrainingError, CleaningError, NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, IdxFormatError, CheckpointFormatError)):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        for path in run(args):
            print(path)
    except Exception as exc:
        code = exit_code(exc)
        where = " > ".join(getattr(exc, "run_context", []))
        print(f"ganshield {args.command}: {type(exc).__name__}{' in ' + where if where else ''}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
