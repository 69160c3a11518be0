"""Command-line entry point.

Subcommands::

    lowprec train CONFIG            train one experiment config
    lowprec sweep CONFIG --var V --values 8,10,12
    lowprec cost --mult 16 --acc 32
    lowprec calibrate CONFIG [--out PATH]

Exit codes: 0 on success, 1 for user errors (bad arguments, unreadable
config, missing dataset), 2 for internal failures.
"""

from __future__ import annotations

import argparse
import sys

from .data import IdxError
from .harness import UserError, calibrate_run, load_config, mac_cost, run, sweep

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowprec",
        description="Train maxout networks with emulated low-precision multipliers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one experiment config")
    p_train.add_argument("config", help="INI experiment description")

    p_sweep = sub.add_parser("sweep", help="train a config once per swept value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--var", required=True, help="sweep variable name")
    p_sweep.add_argument(
        "--values", required=True, help="comma-separated values, e.g. 8,10,12,16,20"
    )

    p_cost = sub.add_parser("cost", help="FPGA cost of one multiply-accumulate unit")
    p_cost.add_argument("--mult", type=int, required=True, help="multiplier bits")
    p_cost.add_argument("--acc", type=int, required=True, help="accumulator bits")

    p_cal = sub.add_parser("calibrate", help="write initial scale exponents")
    p_cal.add_argument("config")
    p_cal.add_argument("--out", default=None, help="exponent table path")
    return parser


def _cmd_train(args) -> int:
    result = run(load_config(args.config))
    print(f"wrote {result.output_dir}")
    print("format,prop_bits,update_bits,test_error")
    print(result.summary_row)
    return 0


def _cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UserError(f"bad --values list: {args.values!r}") from None
    rows = sweep(load_config(args.config), args.var, values)
    print("variable,value,test_error,normalized_error")
    for r in rows:
        print(f"{r.variable},{r.value:g},{r.test_error:.6f},{r.normalized_error:.6f}")
    return 0


def _cmd_cost(args) -> int:
    try:
        cost = mac_cost(args.mult, args.acc)
    except ValueError as err:
        raise UserError(str(err)) from None
    source = "table" if cost.table_alms is not None else "model"
    print(f"mult={cost.mult_bits} acc={cost.acc_bits} alms={cost.alms:.1f} ({source})")
    return 0


def _cmd_calibrate(args) -> int:
    exponents = calibrate_run(load_config(args.config), args.out)
    for gid, exp in sorted(exponents.items()):
        print(f"{gid}\t{exp}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "cost": _cmd_cost,
    "calibrate": _cmd_calibrate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; that is a user error here
        return 1 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (UserError, IdxError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
