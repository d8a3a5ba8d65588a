"""Learning agents and baseline controllers.

Every intersection gets its own agent. The actor-critic agents keep
separate actor and critic networks with a shared LSTM-per-network
layout; Q-learning agents use a feedforward (or plain linear) Q
function with a frozen target copy and a uniform-replay buffer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from atsclab.neural import (
    LayerSpec,
    NetParams,
    RecurrentState,
    StepCache,
    backward,
    clip_gradients,
    forward,
    global_norm,
    init_params,
    rmsprop_update,
    sgd_update,
)
from .returns import (
    a2c_losses,
    estimate_returns,
    policy_output_grads,
    value_output_grads,
)

FINGERPRINT_TOL = 1e-6


class NaNPolicyError(FloatingPointError):
    """Raised when an actor emits a non-finite policy (divergence)."""


class AgentKind(enum.Enum):
    MA2C = "ma2c"
    IA2C = "ia2c"
    IQL_LR = "iql_lr"
    IQL_DNN = "iql_dnn"
    GREEDY = "greedy"

    @property
    def use_fingerprints(self) -> bool:
        return self is AgentKind.MA2C

    @property
    def use_spatial_discount(self) -> bool:
        return self is AgentKind.MA2C

    @property
    def trainable(self) -> bool:
        return self is not AgentKind.GREEDY

    @property
    def actor_critic(self) -> bool:
        return self in (AgentKind.MA2C, AgentKind.IA2C)


@dataclass
class Transition:
    """One buffered agent step (time, inputs, action, reward, next inputs)."""

    step: int  # within-episode time t
    inputs: dict[str, np.ndarray]
    action: int
    reward: float  # discounted, normalized, clipped
    next_inputs: dict[str, np.ndarray]
    done: bool  # True on the final pre-reset step


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay over the first `horizon` steps, flat afterwards."""

    start: float = 1.0
    end: float = 0.01
    horizon: int = 500_000

    def value(self, step: int) -> float:
        if self.horizon <= 0 or step >= self.horizon:
            return self.end
        frac = max(0.0, step / self.horizon)
        return self.start + (self.end - self.start) * frac


class ReplayBuffer:
    """Fixed-capacity ring with uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self.items: list = []
        self.total = 0

    def append(self, item):
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self.total % self.capacity] = item
        self.total += 1

    def sample(self, rng: np.random.Generator, k: int) -> list:
        idx = rng.integers(0, len(self.items), size=k)
        return [self.items[int(i)] for i in idx]

    def __len__(self):
        return len(self.items)


def sample_categorical(pi: np.ndarray, rng) -> int:
    """Inverse-CDF draw; zero-mass actions are never selected."""
    u = rng.random()
    acc = 0.0
    last_positive = 0
    for k, p in enumerate(pi):
        if p > 0.0:
            last_positive = k
            acc += p
            if acc > u:
                return k
    return last_positive


def check_fingerprints(vector: np.ndarray, sizes) -> None:
    """Each concatenated neighbor policy block must sum to 1."""
    off = 0
    for n in sizes:
        block = vector[off : off + n]
        if abs(float(block.sum()) - 1.0) > FINGERPRINT_TOL:
            raise ValueError(f"fingerprint block at offset {off} sums to {block.sum()}")
        off += n


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    splits: int
    rewards: np.ndarray
    dones: list[bool]
    bootstrap: float
    returns: np.ndarray


@dataclass
class A2CHyper:
    gamma: float = 0.99
    beta: float = 0.01
    actor_lr: float = 5e-4
    critic_lr: float = 2.5e-4
    grad_clip: float = 40.0
    rms_decay: float = 0.99
    rms_eps: float = 1e-5


class A2CPolicyAgent:
    """Actor and critic for one intersection, updated per minibatch."""

    def __init__(self, actor_spec: LayerSpec, critic_spec: LayerSpec,
                 rng: np.random.Generator, fingerprint_sizes=()):
        self.actor_spec = actor_spec
        self.critic_spec = critic_spec
        self.actor = init_params(actor_spec, rng)
        self.critic = init_params(critic_spec, rng)
        self.fingerprint_sizes = tuple(fingerprint_sizes)
        self.rec_actor: RecurrentState | None = None
        self.rec_critic: RecurrentState | None = None
        self.rec_actor_batch_start: RecurrentState | None = None
        self.caches: list[StepCache] = []
        self.batch: list[Transition] = []

    def reset_episode(self):
        self.rec_actor = None

    def act(self, inputs, rng, sample: bool = True, cache: bool = True):
        if cache and not self.caches:
            # snapshot for exact mid-batch resume: forwards are replayed from here
            self.rec_actor_batch_start = (
                None
                if self.rec_actor is None
                else RecurrentState(h=self.rec_actor.h.copy(), c=self.rec_actor.c.copy())
            )
        pi, rec, step_cache = forward(self.actor, self.actor_spec, inputs,
                                      self.rec_actor, want_cache=cache)
        if not np.all(np.isfinite(pi)):
            raise NaNPolicyError(f"policy contains non-finite values: {pi}")
        self.rec_actor = rec
        if cache:
            self.caches.append(step_cache)
        action = sample_categorical(pi, rng) if sample else int(np.argmax(pi))
        return action, pi

    def observe(self, transition: Transition):
        if self.batch and not self.batch[-1].done and transition.step <= self.batch[-1].step:
            from .returns import BatchOrderError

            raise BatchOrderError("transitions must be time-ordered within an episode")
        if self.fingerprint_sizes and "fingerprint" in transition.inputs:
            check_fingerprints(transition.inputs["fingerprint"], self.fingerprint_sizes)
        self.batch.append(transition)

    def update(self, bootstrap_inputs, hyper: A2CHyper) -> UpdateStats:
        batch = self.batch
        assert batch and len(batch) == len(self.caches)
        # critic pass over the batch with the frozen (pre-update) weights
        rec = self.rec_critic
        values = []
        vcaches = []
        for tr in batch:
            if tr.step == 0:
                rec = None
            v, rec, cache = forward(self.critic, self.critic_spec, tr.inputs, rec,
                                    want_cache=True)
            values.append(float(v[0]))
            vcaches.append(cache)
        rec_after_batch = rec
        if batch[-1].done:
            bootstrap = 0.0
        else:
            vb, _, _ = forward(self.critic, self.critic_spec, bootstrap_inputs, rec_after_batch)
            bootstrap = float(vb[0])

        rewards = np.array([tr.reward for tr in batch])
        dones = [tr.done for tr in batch]
        returns = estimate_returns(rewards, dones, hyper.gamma, bootstrap)
        policies = [c.out for c in self.caches]
        actions = [tr.action for tr in batch]
        policy_loss, value_loss, advantages, mean_entropy = a2c_losses(
            returns, values, policies, actions, hyper.beta
        )
        if not (np.isfinite(policy_loss) and np.isfinite(value_loss)):
            raise NaNPolicyError(
                f"non-finite loss (policy={policy_loss}, value={value_loss})"
            )

        pgrads = backward(self.actor, self.actor_spec, self.caches,
                          policy_output_grads(policies, actions, advantages, hyper.beta))
        vgrads = backward(self.critic, self.critic_spec, vcaches,
                          value_output_grads(returns, values))
        norm = max(global_norm(pgrads), global_norm(vgrads))
        pgrads = clip_gradients(pgrads, hyper.grad_clip)
        vgrads = clip_gradients(vgrads, hyper.grad_clip)
        rmsprop_update(self.critic, vgrads, hyper.critic_lr, hyper.rms_decay, hyper.rms_eps)
        rmsprop_update(self.actor, pgrads, hyper.actor_lr, hyper.rms_decay, hyper.rms_eps)

        stats = UpdateStats(
            policy_loss=policy_loss,
            value_loss=value_loss,
            entropy=mean_entropy,
            grad_norm=norm,
            splits=sum(dones),
            rewards=rewards,
            dones=dones,
            bootstrap=bootstrap,
            returns=returns,
        )
        self.rec_critic = rec_after_batch
        self.caches = []
        self.batch = []
        return stats


def iql_target(reward: float, done: bool, gamma: float, q_next: np.ndarray) -> float:
    """Frozen-network TD target r + gamma * max Q'(s'); no bootstrap at episode end."""
    if done:
        return float(reward)
    return float(reward + gamma * float(np.max(q_next)))


class IQLAgent:
    """Independent Q-learning for one intersection (linear or feedforward Q)."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, replay_size: int = 1000):
        self.spec = spec
        self.q = init_params(spec, rng)
        self.target = self.q.copy()
        self.replay = ReplayBuffer(replay_size)
        self.skipped_updates = 0

    def q_values(self, inputs, params: NetParams | None = None) -> np.ndarray:
        out, _, _ = forward(params or self.q, self.spec, inputs, None)
        return out

    def act(self, inputs, rng, epsilon: float) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.spec.head_dim))
        return int(np.argmax(self.q_values(inputs)))

    def observe(self, transition: Transition):
        self.replay.append(transition)

    def sync_target(self):
        self.target = self.q.copy()

    def update(self, rng, gamma: float, lr: float, batch_size: int = 20,
               grad_clip: float = 40.0):
        """One squared-TD-error gradient step on a uniform replay sample."""
        if len(self.replay) < batch_size:
            self.skipped_updates += 1
            return None
        sample = self.replay.sample(rng, batch_size)
        caches = []
        d_outs = []
        sq_sum = 0.0
        for tr in sample:
            target = iql_target(tr.reward, tr.done, gamma,
                                self.q_values(tr.next_inputs, self.target))
            out, _, cache = forward(self.q, self.spec, tr.inputs, None, want_cache=True)
            delta = float(out[tr.action]) - target
            sq_sum += delta * delta
            g = np.zeros(self.spec.head_dim)
            g[tr.action] = delta / batch_size
            caches.append(cache)
            d_outs.append(g)
        grads = backward(self.q, self.spec, caches, d_outs)
        norm = global_norm(grads)
        grads = clip_gradients(grads, grad_clip)
        sgd_update(self.q, grads, lr)
        return UpdateStats(
            policy_loss=float("nan"),
            value_loss=sq_sum / (2.0 * batch_size),
            entropy=float("nan"),
            grad_norm=norm,
            splits=0,
            rewards=np.zeros(0),
            dones=[],
            bootstrap=0.0,
            returns=np.zeros(0),
        )


# ----------------------------------------------------------------- baselines


def greedy_action(wave: np.ndarray, phase_lanes) -> int:
    """Phase with the largest total wave over its green lanes (ties: lowest index)."""
    best = 0
    best_score = -np.inf
    for p, lanes in enumerate(phase_lanes):
        score = float(sum(wave[l] for l in lanes))
        if score > best_score:
            best = p
            best_score = score
    return best


def phase_green_lanes(scenario) -> list[list[tuple[int, ...]]]:
    """Per agent, per phase: indices of incoming lanes with a green movement."""
    table = []
    for agent in range(scenario.n_agents):
        lane_index = {key: k for k, key in enumerate(scenario.lane_order[agent])}
        per_phase = []
        for phase in scenario.phases.phases[agent]:
            lanes = sorted({lane_index[(m[0], m[1])] for m in phase})
            per_phase.append(tuple(lanes))
        table.append(per_phase)
    return table


class GreedyController:
    def __init__(self, scenario):
        self.table = phase_green_lanes(scenario)

    def reset(self):
        pass

    def act(self, observations, step, rng):
        return [greedy_action(obs.wave, lanes) for obs, lanes in zip(observations, self.table)]


class RandomController:
    def __init__(self, action_counts):
        self.action_counts = tuple(action_counts)

    def reset(self):
        pass

    def act(self, observations, step, rng):
        return [int(rng.integers(n)) for n in self.action_counts]


class FixedTimeController:
    """Round-robin through phases, holding each for `hold` control steps."""

    def __init__(self, action_counts, hold: int = 2):
        self.action_counts = tuple(action_counts)
        self.hold = max(1, hold)

    def reset(self):
        pass

    def act(self, observations, step, rng):
        return [(step // self.hold) % n for n in self.action_counts]
