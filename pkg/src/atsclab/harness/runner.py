"""Experiment orchestration: training runs, evaluation, MFD extraction.

Output layout for one run under the chosen base directory:

    {out}/{agent}-seed{seed}/
        config.json          resolved configuration snapshot
        training.csv         one row per finished training episode
        summary.json         step / episode / update counters
        checkpoints/step_N/  resumable checkpoints plus final/
        episodes/*.csv       evaluation episode logs
        eval.csv             Table-style temporal average / peak row
        mfd.csv              accumulation vs output flow points

All CSVs use '.' decimals, comma delimiters, a header row and LF line
endings; identical (config, seed) reproduce files byte-for-byte.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from atsclab.neural import params_from_doc, forward
from atsclab.rl.agents import (
    AgentKind,
    FixedTimeController,
    GreedyController,
    RandomController,
    sample_categorical,
)
from atsclab.rl.rewards import FeatureConfig, FeaturePipeline
from atsclab.rl.training import (
    TRAINING_CSV_HEADER,
    Trainer,
    TrainingDiverged,
    build_layer_specs,
)
from atsclab.traffic.scenario import Scenario, load_scenario
from atsclab.traffic.simulator import SimParams, TrafficSim
from .checkpoint import (
    load_agent_docs,
    restore_trainer,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, config_digest, write_config_snapshot

EPISODE_CSV_HEADER = "step,reward,avg_queue,avg_delay,avg_speed,completed,accumulation"
EVAL_CSV_HEADER = (
    "controller,reward_avg,reward_peak,queue_avg,queue_peak,delay_avg,delay_peak,"
    "speed_avg,speed_peak,flow_avg,flow_peak,trip_delay_avg,trip_delay_peak"
)
MFD_CSV_HEADER = "accumulation,flow,partial"

BASELINE_KINDS = ("greedy", "random", "fixed_time")


def resolve_out_dir(cli_out: str | None) -> str:
    return os.environ.get("MA2C_OUT") or cli_out or "out"


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.agent}-seed{cfg.seed}"


def load_run_scenario(cfg: RunConfig) -> Scenario:
    if not cfg.scenario:
        raise ConfigError("config field 'scenario' must point to a scenario file")
    try:
        return load_scenario(cfg.scenario)
    except OSError as err:
        raise ConfigError(f"cannot read scenario {cfg.scenario}: {err}") from err


def sim_params(cfg: RunConfig) -> SimParams:
    return SimParams(
        step_seconds=cfg.step_seconds,
        yellow_seconds=cfg.yellow_seconds,
        saturation_flow=cfg.sim.saturation_flow,
        vehicle_space=cfg.sim.vehicle_space,
        reward_coef=cfg.reward_coef,
    )


# ------------------------------------------------------------------ training


def run_training(cfg: RunConfig, scenario: Scenario, out_base: str,
                 resume_from: str | None = None, update_hook=None,
                 max_steps: int | None = None) -> str:
    """Train until total_steps (or the earlier max_steps runtime stop).

    max_steps only limits this invocation; it does not change the
    configured horizon, so a stopped run resumes under the same digest.
    """
    kind = AgentKind(cfg.agent)
    if not kind.trainable:
        raise ConfigError(f"agent kind {cfg.agent!r} has nothing to train")
    stop = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
    digest = config_digest(cfg, scenario.digest())
    run_dir = os.path.join(out_base, run_id(cfg))
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    csv_path = os.path.join(run_dir, "training.csv")

    trainer = Trainer(cfg, scenario, update_hook=update_hook)
    if resume_from is not None:
        stored = restore_trainer(trainer, resume_from)
        if stored != digest:
            raise ConfigError(
                f"checkpoint digest mismatch:\n  checkpoint {stored}\n  config     {digest}"
            )
        if not os.path.exists(csv_path):
            with open(csv_path, "w", newline="\n") as f:
                f.write(TRAINING_CSV_HEADER + "\n")
    else:
        write_config_snapshot(cfg, os.path.join(run_dir, "config.json"))
        with open(csv_path, "w", newline="\n") as f:
            f.write(TRAINING_CSV_HEADER + "\n")

    def drain_rows():
        if trainer.episode_rows:
            with open(csv_path, "a", newline="\n") as f:
                for row in trainer.episode_rows:
                    f.write(row + "\n")
            trainer.episode_rows.clear()

    try:
        while trainer.global_step < stop:
            trainer.step_once()
            drain_rows()
            if cfg.checkpoint_every and trainer.global_step % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(run_dir, "checkpoints", f"step_{trainer.global_step}"),
                    trainer,
                    digest,
                )
    except (TrainingDiverged, FloatingPointError) as err:
        drain_rows()
        diag = os.path.join(run_dir, "checkpoints", f"diverged_step_{trainer.global_step}")
        save_checkpoint(diag, trainer, digest)
        raise TrainingDiverged(f"{err} (diagnostic checkpoint at {diag})") from err

    drain_rows()
    save_checkpoint(os.path.join(run_dir, "checkpoints", "final"), trainer, digest)
    with open(os.path.join(run_dir, "summary.json"), "w", newline="\n") as f:
        json.dump(trainer.summary(), f, sort_keys=True)
        f.write("\n")
    return run_dir


# ---------------------------------------------------------------- evaluation


class PolicyEvalController:
    """Greedy (argmax) execution of trained actor-critic policies."""

    def __init__(self, cfg: RunConfig, scenario: Scenario, agent_docs, sample: bool = False):
        kind = AgentKind(cfg.agent)
        lane_counts = [len(l) for l in scenario.lane_order]
        action_counts = [scenario.phases.n_actions(i) for i in range(scenario.n_agents)]
        self.pipeline = FeaturePipeline(
            scenario.graph,
            lane_counts,
            action_counts,
            FeatureConfig(
                wave_norm=cfg.wave_norm,
                wait_norm=cfg.wait_norm,
                state_clip=cfg.state_clip,
                alpha=cfg.alpha,
                use_fingerprints=kind.use_fingerprints,
                use_spatial_discount=kind.use_spatial_discount,
            ),
        )
        self.sample = sample
        self.nets = []
        for i, doc in enumerate(agent_docs):
            spec, _ = build_layer_specs(self.pipeline, kind, i, cfg.layers)
            self.nets.append((spec, params_from_doc(doc["actor"])))
        self.recs = [None] * len(self.nets)
        self.fingerprints = self.pipeline.uniform_fingerprints()

    def reset(self):
        self.recs = [None] * len(self.nets)
        self.fingerprints = self.pipeline.uniform_fingerprints()

    def act(self, observations, step, rng):
        actions = []
        policies = []
        for i, (spec, params) in enumerate(self.nets):
            inputs = self.pipeline.inputs_for(i, observations, self.fingerprints)
            pi, rec, _ = forward(params, spec, inputs, self.recs[i])
            self.recs[i] = rec
            policies.append(pi)
            actions.append(sample_categorical(pi, rng) if self.sample else int(np.argmax(pi)))
        self.fingerprints = policies
        return actions


class QEvalController:
    """Argmax execution of trained Q functions."""

    def __init__(self, cfg: RunConfig, scenario: Scenario, agent_docs):
        kind = AgentKind(cfg.agent)
        lane_counts = [len(l) for l in scenario.lane_order]
        action_counts = [scenario.phases.n_actions(i) for i in range(scenario.n_agents)]
        self.pipeline = FeaturePipeline(
            scenario.graph,
            lane_counts,
            action_counts,
            FeatureConfig(
                wave_norm=cfg.wave_norm,
                wait_norm=cfg.wait_norm,
                state_clip=cfg.state_clip,
                alpha=cfg.alpha,
                use_fingerprints=False,
                use_spatial_discount=False,
            ),
        )
        self.nets = []
        for i, doc in enumerate(agent_docs):
            spec = build_layer_specs(self.pipeline, kind, i, cfg.layers)
            self.nets.append((spec, params_from_doc(doc["q"])))

    def reset(self):
        pass

    def act(self, observations, step, rng):
        actions = []
        for i, (spec, params) in enumerate(self.nets):
            inputs = self.pipeline.inputs_for(i, observations, None)
            q, _, _ = forward(params, spec, inputs, None)
            actions.append(int(np.argmax(q)))
        return actions


def make_baseline_controller(kind: str, cfg: RunConfig, scenario: Scenario):
    if kind == "greedy":
        return GreedyController(scenario)
    if kind == "random":
        return RandomController([scenario.phases.n_actions(i) for i in range(scenario.n_agents)])
    if kind == "fixed_time":
        return FixedTimeController(
            [scenario.phases.n_actions(i) for i in range(scenario.n_agents)],
            hold=cfg.fixed_time_hold,
        )
    raise ConfigError(f"unknown baseline kind {kind!r}, pick one of {BASELINE_KINDS}")


def make_checkpoint_controller(cfg: RunConfig, scenario: Scenario, ckpt_dir: str,
                               sample: bool = False):
    expected = config_digest(cfg, scenario.digest())
    docs = load_agent_docs(ckpt_dir)
    stored = docs[0]["config_digest"]
    if stored != expected:
        raise ConfigError(
            "checkpoint config digest mismatch (trained under a different configuration):\n"
            f"  checkpoint {stored}\n  config     {expected}"
        )
    kind = AgentKind(cfg.agent)
    if kind.actor_critic:
        return PolicyEvalController(cfg, scenario, docs, sample=sample)
    if kind.trainable:
        return QEvalController(cfg, scenario, docs)
    raise ConfigError(f"agent kind {cfg.agent!r} has no checkpointed policy")


def run_episode(cfg: RunConfig, sim: TrafficSim, controller, seed: int):
    """One evaluation episode; returns per-step rows plus trip aggregates."""
    obs = sim.reset(seed)
    controller.reset()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    rows = []
    prev_completed = 0
    for step in range(cfg.episode_steps):
        actions = controller.act(obs, step, rng)
        obs, rewards, info = sim.step(actions)
        snap = sim.snapshot_metrics()
        rows.append(
            {
                "step": step,
                "reward": float(np.sum(rewards)),
                "avg_queue": snap.avg_queue,
                "avg_delay": snap.avg_delay,
                "avg_speed": snap.avg_speed,
                "completed": snap.completed,
                "accumulation": snap.accumulation,
                "flow": (snap.completed - prev_completed) / cfg.step_seconds,
            }
        )
        prev_completed = snap.completed
    trips = {
        "count": sim.completed_total,
        "delay_sum": sim.trip_delay_sum,
        "delay_max": sim.trip_delay_max if sim.completed_total else float("nan"),
    }
    return rows, trips


def write_episode_csv(path, rows):
    with open(path, "w", newline="\n") as f:
        f.write(EPISODE_CSV_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r['step']},{r['reward']!r},{r['avg_queue']!r},{r['avg_delay']!r},"
                f"{r['avg_speed']!r},{r['completed']},{r['accumulation']}\n"
            )


def aggregate_eval(label: str, episodes: list[list[dict]], trips: list[dict]) -> dict:
    """Table-style aggregation: spatial series averaged across episodes,
    then temporal average and peak (reward peaks at its minimum)."""

    def series(key):
        arr = np.array([[row[key] for row in ep] for ep in episodes])
        with np.errstate(invalid="ignore"):
            return np.nanmean(arr, axis=0)

    def avg_peak(key, peak_fn):
        s = series(key)
        if np.all(np.isnan(s)):
            return float("nan"), float("nan")
        with np.errstate(invalid="ignore"):
            return float(np.nanmean(s)), float(peak_fn(s))

    reward_avg, reward_peak = avg_peak("reward", np.nanmin)
    queue_avg, queue_peak = avg_peak("avg_queue", np.nanmax)
    delay_avg, delay_peak = avg_peak("avg_delay", np.nanmax)
    speed_avg, speed_peak = avg_peak("avg_speed", np.nanmax)
    flow_avg, flow_peak = avg_peak("flow", np.nanmax)
    count = sum(t["count"] for t in trips)
    delay_sum = sum(t["delay_sum"] for t in trips)
    maxes = [t["delay_max"] for t in trips if not math.isnan(t["delay_max"])]
    return {
        "controller": label,
        "reward_avg": reward_avg,
        "reward_peak": reward_peak,
        "queue_avg": queue_avg,
        "queue_peak": queue_peak,
        "delay_avg": delay_avg,
        "delay_peak": delay_peak,
        "speed_avg": speed_avg,
        "speed_peak": speed_peak,
        "flow_avg": flow_avg,
        "flow_peak": flow_peak,
        "trip_delay_avg": (delay_sum / count) if count else float("nan"),
        "trip_delay_peak": max(maxes) if maxes else float("nan"),
    }


def eval_row_csv(table: dict) -> str:
    cols = EVAL_CSV_HEADER.split(",")
    parts = [table["controller"]]
    parts += [repr(float(table[c])) for c in cols[1:]]
    return ",".join(parts)


def format_eval_table(table: dict) -> str:
    lines = [f"controller: {table['controller']}", "metric                      avg        peak"]
    rows = [
        ("reward", "reward"),
        ("avg queue length [veh]", "queue"),
        ("avg intersection delay [s]", "delay"),
        ("avg vehicle speed [m/s]", "speed"),
        ("trip completion flow [veh/s]", "flow"),
        ("trip delay [s]", "trip_delay"),
    ]
    for label, key in rows:
        lines.append(
            f"{label:<28}{table[f'{key}_avg']:>10.3f} {table[f'{key}_peak']:>11.3f}"
        )
    return "\n".join(lines)


def run_evaluation(cfg: RunConfig, scenario: Scenario, out_dir: str, controller, label: str,
                   n_episodes: int | None = None, seed_base: int | None = None):
    """Shared-seed evaluation: every controller compared on one seed list."""
    n_episodes = n_episodes if n_episodes is not None else cfg.eval_episodes
    seed_base = seed_base if seed_base is not None else cfg.eval_seed_base
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)
    sim = TrafficSim(scenario, sim_params(cfg))
    episodes = []
    trips = []
    for k in range(n_episodes):
        seed = seed_base + k
        rows, trip = run_episode(cfg, sim, controller, seed)
        episodes.append(rows)
        trips.append(trip)
        write_episode_csv(
            os.path.join(out_dir, "episodes", f"{label}_seed{seed}.csv"), rows
        )
    table = aggregate_eval(label, episodes, trips)
    with open(os.path.join(out_dir, "eval.csv"), "w", newline="\n") as f:
        f.write(EVAL_CSV_HEADER + "\n")
        f.write(eval_row_csv(table) + "\n")
    return table


# ----------------------------------------------------------------------- MFD


def emit_mfd(episode_rows: list[list[dict]], step_seconds: int,
             window_seconds: float = 300.0) -> list[tuple[float, float, bool]]:
    """Non-overlapping window means of accumulation vs trip completion flow."""
    window_steps = max(1, int(round(window_seconds / step_seconds)))
    points = []
    for rows in episode_rows:
        for start in range(0, len(rows), window_steps):
            chunk = rows[start : start + window_steps]
            partial = len(chunk) < window_steps
            acc = float(np.mean([r["accumulation"] for r in chunk]))
            completed_in = chunk[-1]["completed"] - (
                rows[start - 1]["completed"] if start else 0
            )
            flow = completed_in / (len(chunk) * step_seconds)
            points.append((acc, flow, partial))
    return points


def read_episode_csv(path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for line in f:
            vals = line.strip().split(",")
            row = dict(zip(header, vals))
            rows.append(
                {
                    "step": int(row["step"]),
                    "reward": float(row["reward"]),
                    "avg_queue": float(row["avg_queue"]),
                    "avg_delay": float(row["avg_delay"]),
                    "avg_speed": float(row["avg_speed"]),
                    "completed": int(row["completed"]),
                    "accumulation": int(row["accumulation"]),
                }
            )
    return rows


def write_mfd_csv(path, points):
    with open(path, "w", newline="\n") as f:
        f.write(MFD_CSV_HEADER + "\n")
        for acc, flow, partial in points:
            f.write(f"{acc!r},{flow!r},{int(partial)}\n")
