"""Command-line interface.

Subcommands: train, evaluate, baseline, mfd, gridgen. Exit codes:
0 success, 1 configuration/usage error, 2 runtime abort. The MA2C_OUT
environment variable overrides --out.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

from atsclab.agent_graph import GraphConfigError
from atsclab.rl.training import TrainingDiverged
from atsclab.traffic.scenario import GridParams, ScenarioError, build_grid_scenario
from atsclab.traffic.simulator import SimConfigError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, validate_config
from . import runner


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="output base directory (default ./out)")
    common.add_argument("--steps", type=int, help="override config total_steps")

    p = Parser(prog="atsclab", description=__doc__)
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", parents=[common], help="train a controller")
    t.add_argument("--resume", help="checkpoint directory to resume from")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    e.add_argument("--episodes", type=int, help="number of evaluation episodes")
    e.add_argument("--seed-base", type=int, help="first evaluation seed")
    e.add_argument("--sample-eval", action="store_true",
                   help="sample from the policy instead of taking the argmax")

    b = sub.add_parser("baseline", parents=[common], help="evaluate a rule-based controller")
    b.add_argument("--kind", required=True, choices=runner.BASELINE_KINDS)
    b.add_argument("--episodes", type=int)
    b.add_argument("--seed-base", type=int)

    m = sub.add_parser("mfd", parents=[common], help="fundamental-diagram scatter from episode logs")
    m.add_argument("--run", required=True, help="run directory containing episodes/*.csv")
    m.add_argument("--window-min", type=float, default=5.0, help="aggregation window (minutes)")

    g = sub.add_parser("gridgen", parents=[common], help="write a synthetic grid scenario")
    g.add_argument("--n", type=int, required=True, help="grid dimension (n x n agents)")
    g.add_argument("--out-file", default="grid.json")
    g.add_argument("--peak-major", type=float, default=1100.0, help="veh/hr per major flow")
    g.add_argument("--peak-minor", type=float, default=300.0, help="veh/hr per minor flow")
    g.add_argument("--episode-seconds", type=float, default=3600.0)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else validate_config(RunConfig())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None and args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    scenario = runner.load_run_scenario(cfg)
    out = runner.resolve_out_dir(args.out)
    run_dir = runner.run_training(cfg, scenario, out, resume_from=args.resume,
                                  max_steps=args.steps)
    print(f"training complete: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    if args.sample_eval:
        cfg.sample_eval = True
    scenario = runner.load_run_scenario(cfg)
    out = runner.resolve_out_dir(args.out)
    run_dir = os.path.join(out, runner.run_id(cfg))
    controller = runner.make_checkpoint_controller(
        cfg, scenario, args.checkpoint, sample=cfg.sample_eval
    )
    table = runner.run_evaluation(
        cfg, scenario, run_dir, controller, cfg.agent,
        n_episodes=args.episodes, seed_base=args.seed_base,
    )
    print(runner.format_eval_table(table))
    return 0


def cmd_baseline(args) -> int:
    cfg = resolve_config(args)
    scenario = runner.load_run_scenario(cfg)
    out = runner.resolve_out_dir(args.out)
    run_dir = os.path.join(out, f"{args.kind}-seed{cfg.seed}")
    controller = runner.make_baseline_controller(args.kind, cfg, scenario)
    table = runner.run_evaluation(
        cfg, scenario, run_dir, controller, args.kind,
        n_episodes=args.episodes, seed_base=args.seed_base,
    )
    print(runner.format_eval_table(table))
    return 0


def cmd_mfd(args) -> int:
    cfg = resolve_config(args)
    pattern = os.path.join(args.run, "episodes", "*.csv")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ConfigError(f"no episode logs match {pattern}")
    episodes = [runner.read_episode_csv(p) for p in paths]
    points = runner.emit_mfd(episodes, cfg.step_seconds, window_seconds=args.window_min * 60.0)
    out_path = os.path.join(args.run, "mfd.csv")
    runner.write_mfd_csv(out_path, points)
    print(f"wrote {len(points)} points to {out_path}")
    return 0


def cmd_gridgen(args) -> int:
    cfg = resolve_config(args)
    scenario = build_grid_scenario(
        args.n,
        GridParams(
            peak_major=args.peak_major,
            peak_minor=args.peak_minor,
            episode_seconds=args.episode_seconds,
        ),
    )
    scenario.save(args.out_file)
    print(f"wrote {scenario.n_agents}-agent scenario to {args.out_file}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "mfd": cmd_mfd,
    "gridgen": cmd_gridgen,
}


def cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            print(parser.format_usage(), file=sys.stderr)
            return 1
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (ConfigError, ScenarioError, GraphConfigError, SimConfigError,
            CheckpointError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as err:
        print(f"runtime abort: {err}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli(sys.argv[1:]))
