"""Command-line entry point: ``fbsdelab <subcommand> [--config PATH] [--out DIR] [--seed N] [--threads N]``."""

from __future__ import annotations

import argparse
import sys
import time

from .lab import SUBCOMMANDS, ConfigError, ExperimentConfig, output_dir, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsdelab", description="Fractional BSDE density lab.")
    p.add_argument("subcommand", choices=SUBCOMMANDS + ("show-config",))
    p.add_argument("--config", help="JSON experiment config (built-in defaults when omitted)")
    p.add_argument("--out", help="output directory (overrides FBSDELAB_OUT and the config)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--threads", type=int, help="worker threads for sampling")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict()
        cfg = cfg.with_overrides(seed=args.seed, threads=args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.subcommand == "show-config":
        sys.stdout.write(cfg.to_json())
        return 0
    t0 = time.perf_counter()
    rep = run(args.subcommand, cfg, args.out)
    for line in rep.lines():
        print(line)
    print(f"{'OK' if rep.passed else 'FAILED'}: {args.subcommand} -> {output_dir(cfg, args.out)} "
          f"({time.perf_counter() - t0:.1f}s)")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
