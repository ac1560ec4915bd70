"""Command line entry point: ``weakmeas run | presets | validate``."""

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, WeakMeasError
from .harness import PRESET_DEFAULTS, PRESETS, REQUIRED, load_config, run_preset, with_overrides

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ENV_OUT_DIR = "WEAKMEAS_OUT_DIR"
ENV_WORKERS = "WEAKMEAS_WORKERS"
DEFAULT_OUT_DIR = "weakmeas_out"


def _parser():
    parser = argparse.ArgumentParser(prog="weakmeas",
                                     description="Continuous weak measurement experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the preset described by a config file")
    run.add_argument("config", help="TOML config file")
    run.add_argument("--out", help=f"output directory (env {ENV_OUT_DIR})")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--workers", type=int, help=f"worker processes (env {ENV_WORKERS})")
    sub.add_parser("presets", help="list presets with their required fields and defaults")
    val = sub.add_parser("validate", help="parse a config file and echo the resolved values")
    val.add_argument("config", help="TOML config file")
    return parser


def _env_workers():
    raw = os.environ.get(ENV_WORKERS)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_WORKERS}: expected an integer, got {raw!r}") from None


def _cmd_run(args):
    cfg = load_config(args.config)
    workers = args.workers if args.workers is not None else _env_workers()
    cfg = with_overrides(cfg, seed=args.seed, workers=workers)
    out = args.out or os.environ.get(ENV_OUT_DIR) or cfg.output_dir or DEFAULT_OUT_DIR
    manifest = run_preset(cfg, Path(out))
    print(f"wrote {len(manifest['files'])} data file(s) and manifest.json to {out}")
    check = manifest.get("purity_check")
    if check is not None and not check["passed"]:
        print(f"warning: mean final purity {check['min_mean_purity']!r} below "
              f"{check['threshold']!r}", file=sys.stderr)
    return EXIT_OK


def _cmd_presets(_args):
    for name, summary in PRESETS.items():
        required = ", ".join(REQUIRED.get(name, ())) or "none"
        defaults = ", ".join(f"{k}={v}" for k, v in PRESET_DEFAULTS.get(name, {}).items())
        print(f"{name}: {summary}")
        print(f"    required: {required}")
        print(f"    defaults: {defaults}")
    return EXIT_OK


def _cmd_validate(args):
    cfg = load_config(args.config)
    print(json.dumps(cfg.echo(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "presets": _cmd_presets, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WeakMeasError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
