"""Command-line entry point: ``qfilter --preset NAME --out-dir DIR``.

Exit status is 0 when every requested invariant check passes, 1 when one
fails and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .runner import PRESETS, ConfigError, load_config, preset, run, validate
from .stochastic import TrajectoryError

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfilter",
                                description="Quantum filtering and Gaussian Kalman experiments.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON experiment configuration")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--trajectories", type=int, help="override n_traj")
    p.add_argument("--workers", type=int,
                   help="worker threads (0 = all cores; default from QFILTER_WORKERS)")
    p.add_argument("--out-dir", default="qfilter-out", help="output directory")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")
    p.add_argument("--list-presets", action="store_true", help="list presets and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _resolve(args) -> object:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("give --config or --preset")
    data = cfg.to_dict()
    if args.seed is not None:
        data["master_seed"] = args.seed
    if args.trajectories is not None:
        data["n_traj"] = args.trajectories
    if args.workers is not None:
        data["workers"] = args.workers
    return validate(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.list_presets:
        for name in sorted(PRESETS):
            print(f"{name}\t{PRESETS[name]['experiment']}")
        return 0
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"qfilter: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    try:
        result = run(cfg, args.out_dir)
    except ConfigError as exc:
        print(f"qfilter: configuration error: {exc}", file=sys.stderr)
        return 2
    except TrajectoryError as exc:
        print(f"qfilter: {exc}", file=sys.stderr)
        return 1
    for check in result.checks:
        print(check.line())
    for path in result.files:
        print(f"wrote {path}")
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
