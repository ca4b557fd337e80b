"""``mssa-lab`` command line.

Exit status: 0 on success, 1 when a run fails numerically (partial
outputs are kept), 2 for usage or configuration errors. Errors are also
printed to stderr as one JSON record.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import KINDS, ConfigError, load_config, load_preset, preset_names
from .idx import IDXFormatError
from .runner import OUT_ENV, LockError, run_experiment

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mssa-lab", description="Run stochastic-approximation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="TOML experiment file")
        src.add_argument("--preset", help="bundled preset name (see `mssa-lab presets`)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./mssa-lab-out, plus a config tag)")
        p.add_argument("--seeds", type=int, help="number of seeds, counted up from the configured base seed")
        p.add_argument("--paper-scale", action="store_true", help="use full-size problem settings")
        p.add_argument("--workers", type=int, default=1, help="processes for parallel seeds")
        p.add_argument("--no-plots", action="store_true", help="skip SVG output")
    sub.add_parser("presets", help="list bundled presets")
    return parser


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "presets":
        for name in preset_names():
            cfg = load_preset(name)
            print(f"{name}\t{cfg.kind}")
        return 0
    try:
        cfg = load_config(args.config) if args.config else load_preset(args.preset)
        if cfg.kind != args.command:
            raise ConfigError(f"config is a {cfg.kind!r} experiment but the subcommand is {args.command!r}")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = cfg.with_overrides(out_dir=args.out, n_seeds=args.seeds, paper_scale=True if args.paper_scale else None)
        if args.no_plots:
            from dataclasses import replace

            cfg = replace(cfg, emit_plots=False)
        result = run_experiment(cfg, workers=args.workers)
    except (ConfigError, IDXFormatError) as err:
        return _error("usage", str(err), 2)
    except LockError as err:
        return _error("locked", str(err), 2)
    summary = json.dumps(result.manifest["summary"], sort_keys=True, default=str)
    print(f"{result.status}: {result.out_dir}")
    print(summary)
    if not result.ok:
        return _error("runtime", result.failure or "unknown failure", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
