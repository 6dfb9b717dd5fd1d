"""Command line entry point.

Every subcommand builds an :class:`~gsadmm.experiments.ExperimentConfig`
from (lowest to highest precedence) the subcommand's defaults, ``--config``,
``--set KEY=VALUE`` and the ``--seed``/``--out`` flags, then runs it.

Exit codes: 0 success, 2 configuration error, 3 divergence-dominated run.
"""

import argparse
import json
import sys

from . import __version__
from .experiments import (PRESETS, ALIASES, ConfigError, ExperimentConfig, ExperimentFailed,
                          _merge, run_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

SUBCOMMANDS = {
    "run-admm": {"pipeline": "admm"},
    "run-sme": {"pipeline": "sme"},
    "weak-error": {"pipeline": "weak_error"},
    "residual-scan": {"pipeline": "residual_scan"},
    "std-scan": {"pipeline": "std_scan"},
    "schedule-demo": {"experiment": "quad1d", "pipeline": "schedule_demo",
                      "schedule": {"kind": "open_loop_u", "params": {}}},
}


def _parse_set(items):
    """``a.b=value`` pairs into a nested dict; values are JSON when they parse."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def _read_json(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--seed", type=int, metavar="U64", help="base seed for all ensembles")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--workers", type=int, default=1, metavar="N",
                   help="worker processes (affects speed only)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                   help="override a config field, e.g. solver.alpha=1.0 (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gsadmm", description="Stochastic ADMM versus its modified equation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        _add_common(sub.add_parser(name, help=f"run the {SUBCOMMANDS[name]['pipeline']} pipeline"))
    exp = sub.add_parser("experiment", help="run a named figure preset")
    exp.add_argument("preset", choices=sorted(set(PRESETS) | set(ALIASES)))
    _add_common(exp)
    return parser


def config_from_args(args):
    layers = []
    if args.config:
        layers.append(_read_json(args.config))
    layers.append(_parse_set(args.overrides))
    flags = {}
    if args.seed is not None:
        flags["ensemble"] = {"base_seed": args.seed}
    if args.out is not None:
        flags["outputs"] = {"directory": args.out}
    layers.append(flags)

    over = {}
    for layer in layers:
        over = _merge(over, layer)
    if args.command == "experiment":
        return ExperimentConfig.preset(args.preset, over)
    # the subcommand fixes the pipeline; everything else may be overridden
    merged = _merge(SUBCOMMANDS[args.command], over)
    merged["pipeline"] = SUBCOMMANDS[args.command]["pipeline"]
    return ExperimentConfig.from_dict(merged)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = config_from_args(args)
        manifest = run_experiment(cfg, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentFailed as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True), file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(manifest.summary, indent=2, sort_keys=True))
    print(f"wrote {len(manifest.outputs)} files to {cfg.outputs['directory']}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
