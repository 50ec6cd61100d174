"""``gmvit <command> --config PATH [--seed N] [--out DIR] [--set section.key=value ...]``

Exit codes: 0 success, 1 validation / missing input, 2 numerical failure
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys

from ..autodiff import NumericalError
from ..data import CorruptDatasetError
from ..distillation import IncompatibleTapsError
from ..model.checkpoint import CheckpointError
from . import commands
from .config import ConfigError, RunConfig, load_config, validate

COMMANDS = {
    "gen-data": commands.cmd_gen_data,
    "train": commands.cmd_train,
    "distill": commands.cmd_distill,
    "eval": commands.cmd_eval,
    "gradcheck": commands.cmd_gradcheck,
    "bench": commands.cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmvit", description="Multi-view shape recognition with distillation.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="INI run config (defaults apply to anything left out)")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", help="override [run] out (for gen-data: the dataset directory)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        try:
            cfg = cfg.set(section, name, value)
        except (AttributeError, KeyError):
            raise ConfigError(f"--set {item!r}: unknown field {section}.{name}") from None
    if args.seed is not None:
        cfg = cfg.set("run", "seed", args.seed)
    if args.out is not None and args.command != "gen-data":
        cfg = cfg.set("run", "out", args.out)
    validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            commands.cmd_gen_data(cfg, args.out)
        else:
            COMMANDS[args.command](cfg)
    except (ConfigError, CorruptDatasetError, CheckpointError, IncompatibleTapsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, commands.GradcheckFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
