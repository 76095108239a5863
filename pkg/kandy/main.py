import argparse
import sys

from kandy import __version__
from kandy.errors import ConfigError, KandyError
from kandy.models.experiment import load_config
from kandy.services.experiment_runner import ExperimentRunner, resolve_run_dir

COMMANDS = ("generate", "train", "discover", "diagnose", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kandy", description="Equation discovery with zero-depth KAN models")
    parser.add_argument("--version", action="version", version=f"kandy {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", default=None, help="run directory (overrides the config)")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("[ERROR] --seed must be non-negative")
        return ConfigError.exit_code
    try:
        cfg = load_config(args.config)
        run_dir = resolve_run_dir(cfg, args.out)
        print(f"[START] {args.command} for {cfg.experiment.name} -> {run_dir}")
        ExperimentRunner(cfg, run_dir, args.seed).handle(args.command)
    except KandyError as e:
        print(f"[ERROR] {type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        # precondition failures that trace back to configuration values
        print(f"[ERROR] ConfigError: {e}")
        return ConfigError.exit_code
    print(f"[OK] {args.command} finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
