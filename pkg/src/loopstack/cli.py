"""Command-line entry point.

    loopstack <task> --config <run.json> [--seed N] [--deterministic] [--out DIR]

Exit codes: 0 success, 1 usage/config error, 2 invariant/audit
violation, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .config import TASKS, load_run_config
from .errors import AuditError, ConfigError, DivergenceError
from .harness import run_task
from .numerics import set_deterministic


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; route them through ConfigError so
    # usage problems share exit code 1 with config problems.
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loopstack",
                description="looped-transformer runtime: fidelity reports, "
                            "strategy sweeps, decode audits, and the toy "
                            "integrator lab")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--config", required=True, help="path to the run JSON")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's run seed")
    p.add_argument("--deterministic", action="store_true",
                   help="bit-reproducible output (timings reported as 0)")
    p.add_argument("--out", default=None, help="override the report directory")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.deterministic:
            cfg.deterministic = True
        if args.out is not None:
            cfg.out_dir = args.out
        set_deterministic(cfg.deterministic)
        for path in run_task(args.task, cfg):
            print(path)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AuditError as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
