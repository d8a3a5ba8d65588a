"""Synchronous multi-agent training loop.

Every control step, all agents sample actions from their current
policies, the simulator advances, rewards are spatially discounted
(or globally summed), normalized, clipped and buffered. Episodes
restart at the horizon; when the minibatch is full every agent takes
one critic and one actor gradient step and the buffer is flushed.
Q-learning agents instead push transitions into replay and update
every step with a frozen target network.

The Trainer owns every piece of mutable state (simulator, networks,
recurrent states, buffers, RNGs, counters) and can serialize all of
it, so a run can be checkpointed mid-episode and resumed
bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atsclab.neural import GroupSpec, LayerSpec, RecurrentState, forward, params_from_doc, params_to_doc
from atsclab.traffic.simulator import SimParams, TrafficSim, _rng_doc, _rng_restore
from .agents import (
    A2CHyper,
    A2CPolicyAgent,
    AgentKind,
    EpsilonSchedule,
    IQLAgent,
    Transition,
    UpdateStats,
)
from .rewards import FeatureConfig, FeaturePipeline, spatial_discount_all

TRAINING_CSV_HEADER = (
    "episode,global_step,avg_episode_reward,policy_loss,value_loss,entropy,grad_norm,reward_std"
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or policy stops being finite."""


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def build_layer_specs(pipeline: FeaturePipeline, kind: AgentKind, agent: int, sizes):
    """Network shapes for one agent: (actor, critic) or a single Q spec."""
    dims = pipeline.group_dims(agent)
    n_actions = pipeline.action_counts[agent]
    if kind is AgentKind.IQL_LR:
        groups = tuple(GroupSpec(name, dim, 0) for name, dim in dims.items())
        return LayerSpec(groups, "none", 1, "linear", n_actions)
    branch = {"wave": sizes.wave, "wait": sizes.wait, "fingerprint": sizes.fingerprint}
    groups = tuple(GroupSpec(name, dim, branch[name]) for name, dim in dims.items())
    if kind is AgentKind.IQL_DNN:
        return LayerSpec(groups, "fc", sizes.core, "linear", n_actions)
    actor = LayerSpec(groups, "lstm", sizes.core, "softmax", n_actions)
    critic = LayerSpec(groups, "lstm", sizes.core, "linear", 1)
    return actor, critic


@dataclass
class LayerSizes:
    wave: int = 128
    wait: int = 32
    fingerprint: int = 64
    core: int = 64


class Trainer:
    """Owns one training run; config is any object with the RunConfig fields."""

    def __init__(self, config, scenario, update_hook=None):
        self.cfg = config
        self.scenario = scenario
        self.kind = AgentKind(config.agent)
        if not self.kind.trainable:
            raise ValueError(f"agent kind {self.kind.value!r} cannot be trained")
        self.update_hook = update_hook

        self.sim = TrafficSim(
            scenario,
            SimParams(
                step_seconds=config.step_seconds,
                yellow_seconds=config.yellow_seconds,
                saturation_flow=config.sim.saturation_flow,
                vehicle_space=config.sim.vehicle_space,
                reward_coef=config.reward_coef,
            ),
        )
        lane_counts = [len(l) for l in scenario.lane_order]
        action_counts = [scenario.phases.n_actions(i) for i in range(scenario.n_agents)]
        self.pipeline = FeaturePipeline(
            scenario.graph,
            lane_counts,
            action_counts,
            FeatureConfig(
                wave_norm=config.wave_norm,
                wait_norm=config.wait_norm,
                state_clip=config.state_clip,
                alpha=config.alpha,
                use_fingerprints=self.kind.use_fingerprints,
                use_spatial_discount=self.kind.use_spatial_discount,
            ),
        )
        self.hyper = A2CHyper(
            gamma=config.gamma,
            beta=config.beta,
            actor_lr=config.actor_lr,
            critic_lr=config.critic_lr,
            grad_clip=config.grad_clip,
            rms_decay=config.rmsprop.decay,
            rms_eps=config.rmsprop.epsilon,
        )
        self.epsilon = EpsilonSchedule(
            start=config.iql.eps_start,
            end=config.iql.eps_end,
            horizon=max(1, config.total_steps // 2),
        )

        init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        self.agents = []
        for i in range(scenario.n_agents):
            if self.kind.actor_critic:
                actor_spec, critic_spec = build_layer_specs(
                    self.pipeline, self.kind, i, config.layers
                )
                fp_sizes = (
                    tuple(action_counts[j] for j in scenario.graph.neighbors(i))
                    if self.kind.use_fingerprints
                    else ()
                )
                self.agents.append(
                    A2CPolicyAgent(actor_spec, critic_spec, init_rng, fingerprint_sizes=fp_sizes)
                )
            else:
                spec = build_layer_specs(self.pipeline, self.kind, i, config.layers)
                self.agents.append(IQLAgent(spec, init_rng, replay_size=config.iql.replay_size))

        self.policy_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.global_step = 0
        self.t = 0
        self.episode = 0
        self.updates = 0
        self.update_rounds = 0
        self.episode_rows: list[str] = []
        self._reward_sum = 0.0
        self._reward_sqsum = 0.0
        self._update_stats: list[UpdateStats] = []
        self.obs = self.sim.reset(self._episode_seed(0))
        self.fingerprints = self.pipeline.uniform_fingerprints()

    # ---------------------------------------------------------------- stepping

    def _episode_seed(self, episode: int):
        return np.random.SeedSequence([self.cfg.seed, 3, episode])

    def run(self, max_steps: int):
        while self.global_step < max_steps:
            self.step_once()

    def step_once(self):
        if self.kind.actor_critic:
            self._a2c_step()
        else:
            self._iql_step()
        self.global_step += 1

    def _reward_pathway(self, raw_rewards: np.ndarray) -> np.ndarray:
        if self.kind.use_spatial_discount:
            discounted = spatial_discount_all(self.scenario.graph, raw_rewards, self.cfg.alpha)
        else:
            discounted = np.full(self.scenario.n_agents, float(np.sum(raw_rewards)))
        scale = self.cfg.reward_norm
        clip = self.cfg.reward_clip
        return np.clip(discounted / scale, -clip, clip)

    def _log_episode_progress(self, raw_rewards: np.ndarray):
        total = float(np.sum(raw_rewards))
        self._reward_sum += total
        self._reward_sqsum += total * total

    def _finish_episode(self):
        n = self.cfg.episode_steps
        mean = self._reward_sum / n
        var = max(0.0, self._reward_sqsum / n - mean * mean)
        stats = self._update_stats
        row = (
            f"{self.episode},{self.global_step + 1},{mean!r},"
            f"{_mean([s.policy_loss for s in stats])!r},"
            f"{_mean([s.value_loss for s in stats])!r},"
            f"{_mean([s.entropy for s in stats])!r},"
            f"{_mean([s.grad_norm for s in stats])!r},"
            f"{float(np.sqrt(var))!r}"
        )
        self.episode_rows.append(row)
        self._reward_sum = 0.0
        self._reward_sqsum = 0.0
        self._update_stats = []
        self.episode += 1
        self.t = 0
        self.obs = self.sim.reset(self._episode_seed(self.episode))
        self.fingerprints = self.pipeline.uniform_fingerprints()
        for agent in self.agents:
            if isinstance(agent, A2CPolicyAgent):
                agent.reset_episode()

    def _a2c_step(self):
        actions = []
        policies = []
        for i, agent in enumerate(self.agents):
            inputs = self.pipeline.inputs_for(i, self.obs, self.fingerprints)
            a, pi = agent.act(inputs, self.policy_rng, sample=True, cache=True)
            actions.append(a)
            policies.append(pi)
        next_obs, raw_rewards, _ = self.sim.step(actions)
        shaped = self._reward_pathway(raw_rewards)
        done = self.t + 1 == self.cfg.episode_steps
        for i, agent in enumerate(self.agents):
            agent.observe(
                Transition(
                    step=self.t,
                    inputs=self.pipeline.inputs_for(i, self.obs, self.fingerprints),
                    action=actions[i],
                    reward=float(shaped[i]),
                    next_inputs=self.pipeline.inputs_for(i, next_obs, policies),
                    done=done,
                )
            )
        self._log_episode_progress(raw_rewards)
        self.t += 1
        if done:
            self._finish_episode()
        else:
            self.obs = next_obs
            self.fingerprints = policies
        if len(self.agents[0].batch) == self.cfg.batch_steps:
            self._a2c_update()

    def _a2c_update(self):
        try:
            for i, agent in enumerate(self.agents):
                bootstrap_inputs = self.pipeline.inputs_for(i, self.obs, self.fingerprints)
                stats = agent.update(bootstrap_inputs, self.hyper)
                self._update_stats.append(stats)
                if self.update_hook is not None:
                    self.update_hook(self.update_rounds, i, stats)
            self.update_rounds += 1
            self.updates += len(self.agents)
        except FloatingPointError as err:
            raise TrainingDiverged(str(err)) from err

    def _iql_step(self):
        eps = self.epsilon.value(self.global_step)
        actions = []
        inputs_now = []
        for i, agent in enumerate(self.agents):
            inputs = self.pipeline.inputs_for(i, self.obs, self.fingerprints)
            inputs_now.append(inputs)
            actions.append(agent.act(inputs, self.policy_rng, eps))
        next_obs, raw_rewards, _ = self.sim.step(actions)
        shaped = self._reward_pathway(raw_rewards)
        done = self.t + 1 == self.cfg.episode_steps
        for i, agent in enumerate(self.agents):
            agent.observe(
                Transition(
                    step=self.t,
                    inputs=inputs_now[i],
                    action=actions[i],
                    reward=float(shaped[i]),
                    next_inputs=self.pipeline.inputs_for(i, next_obs, self.fingerprints),
                    done=done,
                )
            )
        self._log_episode_progress(raw_rewards)
        self.t += 1
        if done:
            self._finish_episode()
        else:
            self.obs = next_obs
        for agent in self.agents:
            stats = agent.update(
                self.policy_rng,
                gamma=self.cfg.gamma,
                lr=self.cfg.iql.lr,
                batch_size=self.cfg.iql.batch_size,
                grad_clip=self.cfg.grad_clip,
            )
            if stats is not None:
                self._update_stats.append(stats)
                self.updates += 1
        if (self.global_step + 1) % self.cfg.iql.target_sync == 0:
            for agent in self.agents:
                agent.sync_target()

    # ----------------------------------------------------------- persistence

    def state_doc(self) -> dict:
        agents_doc = []
        for agent in self.agents:
            if isinstance(agent, A2CPolicyAgent):
                agents_doc.append(
                    {
                        "kind": "a2c",
                        "actor": params_to_doc(agent.actor),
                        "critic": params_to_doc(agent.critic),
                        "rec_critic": _rec_doc(agent.rec_critic),
                        "rec_batch_start": _rec_doc(agent.rec_actor_batch_start),
                        "batch": [_transition_doc(tr) for tr in agent.batch],
                    }
                )
            else:
                agents_doc.append(
                    {
                        "kind": "iql",
                        "q": params_to_doc(agent.q),
                        "target": params_to_doc(agent.target),
                        "replay": [_transition_doc(tr) for tr in agent.replay.items],
                        "replay_total": agent.replay.total,
                        "skipped": agent.skipped_updates,
                    }
                )
        return {
            "format": "atsclab-train-v1",
            "global_step": self.global_step,
            "t": self.t,
            "episode": self.episode,
            "updates": self.updates,
            "update_rounds": self.update_rounds,
            "reward_sum": self._reward_sum,
            "reward_sqsum": self._reward_sqsum,
            "update_stats": [
                {
                    "policy_loss": s.policy_loss,
                    "value_loss": s.value_loss,
                    "entropy": s.entropy,
                    "grad_norm": s.grad_norm,
                }
                for s in self._update_stats
            ],
            "policy_rng": _rng_doc(self.policy_rng),
            "sim": self.sim.state_doc(),
            "fingerprints": [[float(x) for x in fp] for fp in self.fingerprints],
            "agents": agents_doc,
        }

    def restore(self, doc: dict):
        if doc.get("format") != "atsclab-train-v1":
            raise ValueError(f"unsupported trainer document {doc.get('format')!r}")
        self.global_step = int(doc["global_step"])
        self.t = int(doc["t"])
        self.episode = int(doc["episode"])
        self.updates = int(doc["updates"])
        self.update_rounds = int(doc["update_rounds"])
        self._reward_sum = float(doc["reward_sum"])
        self._reward_sqsum = float(doc["reward_sqsum"])
        self._update_stats = [
            UpdateStats(
                policy_loss=float(s["policy_loss"]),
                value_loss=float(s["value_loss"]),
                entropy=float(s["entropy"]),
                grad_norm=float(s["grad_norm"]),
                splits=0,
                rewards=np.zeros(0),
                dones=[],
                bootstrap=0.0,
                returns=np.zeros(0),
            )
            for s in doc["update_stats"]
        ]
        _rng_restore(self.policy_rng, doc["policy_rng"])
        self.sim.load_state_doc(doc["sim"])
        self.fingerprints = [np.array(fp) for fp in doc["fingerprints"]]
        self.obs = self.sim._observe()
        for agent, adoc in zip(self.agents, doc["agents"]):
            if adoc["kind"] == "a2c":
                agent.actor = params_from_doc(adoc["actor"])
                agent.critic = params_from_doc(adoc["critic"])
                agent.rec_critic = _rec_from_doc(adoc["rec_critic"])
                agent.rec_actor_batch_start = _rec_from_doc(adoc["rec_batch_start"])
                agent.batch = [_transition_from_doc(d) for d in adoc["batch"]]
                # replay the buffered steps to rebuild forward caches exactly
                agent.caches = []
                rec = agent.rec_actor_batch_start
                for tr in agent.batch:
                    if tr.step == 0:
                        rec = None
                    _, rec, cache = forward(agent.actor, agent.actor_spec, tr.inputs, rec,
                                            want_cache=True)
                    agent.caches.append(cache)
                agent.rec_actor = rec
            else:
                agent.q = params_from_doc(adoc["q"])
                agent.target = params_from_doc(adoc["target"])
                agent.replay.items = [_transition_from_doc(d) for d in adoc["replay"]]
                agent.replay.total = int(adoc["replay_total"])
                agent.skipped_updates = int(adoc["skipped"])

    def summary(self) -> dict:
        return {
            "agent": self.kind.value,
            "global_step": self.global_step,
            "episodes": self.episode,
            "updates": self.updates,
            "update_rounds": self.update_rounds,
        }


def _rec_doc(rec: RecurrentState | None):
    if rec is None:
        return None
    return {"h": [float(x) for x in rec.h], "c": [float(x) for x in rec.c]}


def _rec_from_doc(doc):
    if doc is None:
        return None
    return RecurrentState(h=np.array(doc["h"]), c=np.array(doc["c"]))


def _transition_doc(tr: Transition) -> dict:
    return {
        "step": tr.step,
        "inputs": {k: [float(x) for x in v] for k, v in tr.inputs.items()},
        "action": tr.action,
        "reward": tr.reward,
        "next_inputs": {k: [float(x) for x in v] for k, v in tr.next_inputs.items()},
        "done": tr.done,
    }


def _transition_from_doc(doc: dict) -> Transition:
    return Transition(
        step=int(doc["step"]),
        inputs={k: np.array(v) for k, v in doc["inputs"].items()},
        action=int(doc["action"]),
        reward=float(doc["reward"]),
        next_inputs={k: np.array(v) for k, v in doc["next_inputs"].items()},
        done=bool(doc["done"]),
    )
