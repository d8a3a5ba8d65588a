"""Run configuration: defaults, file loading, validation, digests.

Config files are JSON objects mirroring RunConfig field names, with
nested objects for the layers / iql / sim / rmsprop blocks. Every
field has a default, so an empty file (or no file) yields the stock
hyperparameters. Unknown keys are rejected with a nearest-key hint;
bound violations name the field and the bound.

The config digest pins everything that affects training dynamics plus
the scenario content; checkpoints carry it so evaluation can refuse
silently drifted configs.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields

from atsclab.rl.training import LayerSizes


class ConfigError(ValueError):
    """Raised for unparseable, unknown, or out-of-bound configuration."""


@dataclass
class IqlConfig:
    lr: float = 1e-4
    batch_size: int = 20
    replay_size: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.01
    target_sync: int = 500


@dataclass
class SimConfig:
    saturation_flow: float = 0.5  # veh/s/lane
    vehicle_space: float = 7.5  # m


@dataclass
class RmspropConfig:
    decay: float = 0.99
    epsilon: float = 1e-5


@dataclass
class RunConfig:
    agent: str = "ma2c"
    gamma: float = 0.99  # temporal discount
    alpha: float = 0.75  # spatial discount
    beta: float = 0.01  # entropy weight
    actor_lr: float = 5e-4
    critic_lr: float = 2.5e-4
    batch_steps: int = 120  # minibatch length |B|
    episode_steps: int = 720  # horizon T
    step_seconds: int = 5  # control interval
    yellow_seconds: int = 2
    reward_coef: float = 0.2  # veh/s
    wave_norm: float = 5.0  # veh
    wait_norm: float = 100.0  # s
    reward_norm: float = 2000.0  # veh
    state_clip: float = 2.0
    reward_clip: float = 2.0
    grad_clip: float = 40.0
    total_steps: int = 1_000_000
    seed: int = 0
    scenario: str = ""
    eval_episodes: int = 10
    eval_seed_base: int = 10_000
    sample_eval: bool = False
    checkpoint_every: int = 100_000
    fixed_time_hold: int = 2
    layers: LayerSizes = field(default_factory=LayerSizes)
    iql: IqlConfig = field(default_factory=IqlConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    rmsprop: RmspropConfig = field(default_factory=RmspropConfig)


# fields that vary per run without changing what was learned
DIGEST_EXCLUDE = {"seed", "scenario", "eval_episodes", "eval_seed_base", "sample_eval",
                  "checkpoint_every"}

VALID_AGENTS = ("ma2c", "ia2c", "iql_lr", "iql_dnn", "greedy")


def _coerce(value, target_type, path):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type")


def _fill_dataclass(cls, data: dict, path: str = ""):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            extra = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown config key {path}{key!r}{extra}")
        f = known[key]
        if dataclasses.is_dataclass(f.type) or f.name in ("layers", "iql", "sim", "rmsprop"):
            sub_cls = {"layers": LayerSizes, "iql": IqlConfig, "sim": SimConfig,
                       "rmsprop": RmspropConfig}[f.name]
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key}: expected an object")
            kwargs[key] = _fill_dataclass(sub_cls, value, path=f"{key}.")
        else:
            target = {"agent": str, "scenario": str, "sample_eval": bool}.get(f.name)
            if target is None:
                target = int if isinstance(f.default, int) and not isinstance(f.default, bool) else float
                if isinstance(f.default, bool):
                    target = bool
            kwargs[key] = _coerce(value, target, f"{path}{key}")
    return cls(**kwargs)


def _check(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: RunConfig) -> RunConfig:
    _check(cfg.agent in VALID_AGENTS, f"agent must be one of {VALID_AGENTS}, got {cfg.agent!r}")
    _check(0.0 <= cfg.gamma < 1.0, f"gamma must satisfy 0 <= gamma < 1, got {cfg.gamma}")
    _check(0.0 <= cfg.alpha <= 1.0, f"alpha must satisfy 0 <= alpha <= 1, got {cfg.alpha}")
    _check(cfg.beta >= 0.0, f"beta must be >= 0, got {cfg.beta}")
    _check(cfg.step_seconds > cfg.yellow_seconds >= 0,
           f"need step_seconds > yellow_seconds >= 0, got {cfg.step_seconds} / {cfg.yellow_seconds}")
    for name in ("actor_lr", "critic_lr", "wave_norm", "wait_norm", "reward_norm",
                 "state_clip", "reward_clip", "grad_clip"):
        _check(getattr(cfg, name) > 0.0, f"{name} must be > 0")
    _check(cfg.batch_steps >= 1, "batch_steps must be >= 1")
    _check(cfg.episode_steps >= 1, "episode_steps must be >= 1")
    _check(cfg.total_steps >= 0, "total_steps must be >= 0")
    _check(cfg.reward_coef >= 0.0, "reward_coef must be >= 0")
    _check(cfg.iql.lr > 0.0, "iql.lr must be > 0")
    _check(cfg.iql.batch_size >= 1, "iql.batch_size must be >= 1")
    _check(cfg.iql.replay_size >= 1, "iql.replay_size must be >= 1")
    _check(cfg.iql.target_sync >= 1, "iql.target_sync must be >= 1")
    _check(cfg.sim.saturation_flow > 0.0, "sim.saturation_flow must be > 0")
    _check(cfg.sim.vehicle_space > 0.0, "sim.vehicle_space must be > 0")
    for name in ("wave", "wait", "fingerprint", "core"):
        _check(getattr(cfg.layers, name) >= 1, f"layers.{name} must be >= 1")
    return cfg


def config_from_doc(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a JSON object")
    return validate_config(_fill_dataclass(RunConfig, doc))


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not text.strip():
        return validate_config(RunConfig())
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return config_from_doc(doc)


def config_to_doc(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_digest(cfg: RunConfig, scenario_digest: str) -> str:
    doc = config_to_doc(cfg)
    for key in DIGEST_EXCLUDE:
        doc.pop(key, None)
    payload = json.dumps({"config": doc, "scenario": scenario_digest}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def write_config_snapshot(cfg: RunConfig, path):
    with open(path, "w", newline="\n") as f:
        json.dump(config_to_doc(cfg), f, indent=1, sort_keys=True)
        f.write("\n")
