"""Command line front end.

Subcommands: gen-data, train, eval, diag, grad-check. Shared flags:
--config <json>, --seed <u64>, --out <dir>, --scale {toy,paper};
command-line values override the config file. Exit codes: 0 on
success, 1 on a usage problem, 2 on a numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .harness import (NumericalError, RunConfig, UsageError, cmd_diag,
                      cmd_eval, cmd_gen_data, cmd_grad_check, cmd_train)

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "diag": cmd_diag,
    "grad-check": cmd_grad_check,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; our contract reserves 2 for
    # numerical failures, so route through the usual exception
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panorec",
                description="panoramic-to-volume reconstruction runs")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, prog=f"panorec {name}")
        sp.add_argument("--config", metavar="PATH",
                        help="JSON run config (defaults apply otherwise)")
        sp.add_argument("--seed", type=int, metavar="U64",
                        help="override the config seed")
        sp.add_argument("--out", default=".", metavar="DIR",
                        help="output directory (default: cwd)")
        sp.add_argument("--scale", choices=("toy", "paper"),
                        help="override the config scale")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (gen-data, train, "
                             "eval, diag, grad-check)")
        cfg = (RunConfig.from_json(args.config) if args.config
               else RunConfig())
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.scale is not None:
            cfg = replace(cfg, scale=args.scale)
        os.makedirs(args.out, exist_ok=True)
        result = COMMANDS[args.command](cfg, args.out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    for key, value in sorted(result.items()):
        print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
