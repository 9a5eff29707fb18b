"""Command-line entry point: ``andmask <command> [--config FILE] [flags]``.

Values come from an optional TOML file and are overridden by flags. The
resolved configuration is echoed to stdout and written next to the
artifacts. ``--seed`` is required for every command that draws random
numbers.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .experiments import PAPER_SCALE, ExperimentSpec, SpecError, run_experiment

COMMANDS = {
    "gen-data": "gen_data",
    "train": "train",
    "suppress": "suppress",
    "correlate": "correlate",
    "consistency": "consistency",
    "env-sweep": "env_sweep",
    "label-noise": "label_noise",
    "patchwork": "patchwork",
}

# flag name -> (type, help); only added to the listed commands
_FLAGS = {
    "gen_data": [("num_envs", int, "environments"), ("per_env", int, "examples per environment"),
                 ("test_size", int, "test examples"), ("shortcut_sigma", float, "shortcut std")],
    "train": [("dataset", str, "training CSV"), ("test", str, "test CSV"), ("recipe", str, "named preset"),
              ("mask_rule", str, "none|and|xor|geometric"), ("tau", float, "agreement threshold"),
              ("optimizer", str, "gd|adam|temporal_adam"), ("learning_rate", float, "step size"),
              ("batch_size", int, "examples per step"), ("epochs", int, "passes over the data"),
              ("l1_coeff", float, "L1 coefficient"), ("l2_coeff", float, "L2 coefficient"),
              ("dropout_rate", float, "dropout rate"), ("hidden_layers", int, "hidden layers"),
              ("hidden_units", int, "units per hidden layer")],
    "suppress": [("n", int, "parameters"), ("trials", int, "trials per d"), ("t_rule", str, "fraction or 'half'")],
    "correlate": [("num_seeds", int, "network seeds"), ("num_envs", int, "environments"),
                  ("batch_size", int, "examples over all environments")],
    "consistency": [("model", str, "saved model JSON"), ("dataset", str, "dataset CSV"),
                    ("epsilon", float, "loss tolerance"), ("num_steps", int, "walk steps"),
                    ("num_restarts", int, "walks per environment"), ("discrepancy", str, "anchored|pointwise"),
                    ("max_per_env", int, "examples per environment used")],
    "env_sweep": [("num_seeds", int, "seeds per setting"), ("per_env", int, "examples per environment"),
                  ("epochs", int, "override floor(3000/D)")],
    "label_noise": [("fraction", float, "share of corrupted labels"), ("num_seeds", int, "seeds"),
                    ("num_envs", int, "environments"), ("per_env", int, "examples per environment"),
                    ("epochs", int, "override floor(3000/D)")],
    "patchwork": [("grid", int, "grid points"), ("epsilon", float, "loss tolerance"), ("num_steps", int, "walk steps")],
}
_LISTS = {
    "suppress": [("d_list", int)],
    "correlate": [("tau_grid", float)],
    "env_sweep": [("D_list", int), ("recipes", str)],
    "label_noise": [("recipes", str)],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="andmask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML file; flags override its values")
        p.add_argument("--out", dest="output_path", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (required unless stated otherwise)")
        p.add_argument("--workers", type=int, help="parallel workers")
        if kind in ("train", "env_sweep", "label_noise"):
            p.add_argument("--early-stop", dest="early_stop", action="store_true", default=None,
                           help="stop once train acc > 0.97 while test acc < 0.6")
        if kind in ("gen_data", "env_sweep", "label_noise"):
            p.add_argument("--paper-scale", action="store_true", default=None,
                           help="use the full per-environment example count")
        for flag, typ, help_ in _FLAGS.get(kind, []):
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, help=help_)
        for flag, typ in _LISTS.get(kind, []):
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, nargs="+")
    return parser


def load_toml(path: Path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    params = dict(data.get("params", {}))
    params.update({k: v for k, v in data.items() if k != "params"})
    return params


def resolve(args: argparse.Namespace) -> ExperimentSpec:
    kind = COMMANDS[args.command]
    params = load_toml(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    params.update(flags)
    if params.pop("paper_scale", False):
        params.update(PAPER_SCALE)
    seed = params.pop("seed", None)
    out = params.pop("output_path", None)
    return ExperimentSpec(kind=kind, output_path=out, seed=seed, params=params)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = resolve(args)
        spec.validate()
    except (SpecError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(spec.resolved(), sort_keys=True, default=str))
    artifacts = run_experiment(spec)
    for name, path in sorted(artifacts.items()):
        print(f"wrote {name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
