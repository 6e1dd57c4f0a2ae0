"""Command line entry point: ``xaiens [global flags] <command>``.

On failure the last line on stderr is ``error stage=<command> type=<Exception> msg=<text>``
and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, dump_toml, load_config
from .ensembler import FUSIONS
from .pipeline import run_all, run_stage

EXIT_ERROR = 1
EXIT_CONFIG = 2


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="override [run] seed")
    parser.add_argument("--out", default=default, help="override [run] out directory")
    parser.add_argument("--preset", default=default, help="baseline0, local3, cited4, diverse7 or A+B+...")
    parser.add_argument("--fusion", choices=FUSIONS, default=default, help="ensembler fusion mode")
    parser.add_argument("--cutoff", type=float, default=default, help="binarization cut-off in (0, 1)")
    parser.add_argument("--force", action="store_true", default=default, help="re-run even when outputs are fresh")
    parser.add_argument("-v", "--verbose", action="count", default=default, help="more logging (-vv for debug)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xaiens", description="Explanation ensembling pipeline.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "synth": "write the synthetic shapes dataset",
        "train-classifier": "train (or import) the classifier to explain",
        "explain": "fill the explanation cache",
        "train-ensembler": "train the ensembler and write its history",
        "eval": "ensembling metrics, derived metrics and quality radar data",
        "ablate": "disable-one-input study",
        "report": "collect plot data into one bundle",
        "all": "run every stage in order",
        "show-config": "print the resolved configuration as TOML",
    }
    for name, text in helps.items():
        _global_flags(sub.add_parser(name, help=text), suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print("error stage=cli type=UsageError msg=invalid arguments", file=sys.stderr)
        return int(exc.code or 0)

    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose or 0, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(
            args.config, seed=args.seed, out=args.out, preset=args.preset, fusion=args.fusion, cutoff=args.cutoff
        )
    except (ConfigError, OSError) as exc:
        _report_error("config", exc)
        return EXIT_CONFIG

    try:
        if args.command == "show-config":
            sys.stdout.write(dump_toml(cfg))
        elif args.command == "all":
            run_all(cfg, force=bool(args.force))
        else:
            ran = run_stage(cfg, args.command, force=bool(args.force))
            print(f"{args.command}: {'done' if ran else 'up to date'} ({cfg.out_dir})")
    except KeyboardInterrupt:
        _report_error(args.command, RuntimeError("interrupted"))
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        logging.getLogger(__name__).debug("failure", exc_info=True)
        _report_error(args.command, exc)
        return EXIT_ERROR
    return 0


def _report_error(stage: str, exc: BaseException) -> None:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error stage={stage} type={type(exc).__name__} msg={msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
