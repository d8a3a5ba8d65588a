"""n-step return estimation and actor-critic loss terms.

Returns run backward through a minibatch: R_t = r_t + gamma * R_{t+1},
bootstrapped with a frozen-critic value beyond the batch horizon.
Transitions flagged as the final pre-reset step cut the recursion (no
reward flows across an episode boundary, and no bootstrap is added
when the batch itself ends an episode).
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12  # keeps log(pi) finite for saturated policies


class BatchOrderError(ValueError):
    """Raised when a minibatch is not in time order."""


def estimate_returns(rewards, dones, gamma: float, bootstrap: float) -> np.ndarray:
    """Discounted returns over one agent's minibatch.

    rewards[t] is the (already discounted/normalized) step reward,
    dones[t] marks the final step before an episode reset. bootstrap
    is the frozen-critic value of the state right after the batch; it
    is ignored when dones[-1] is set.
    """
    rewards = np.asarray(rewards, dtype=float)
    k = rewards.shape[0]
    out = np.empty(k)
    running = float(bootstrap)
    for t in range(k - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def entropy(pi: np.ndarray) -> float:
    p = np.asarray(pi, dtype=float)
    return float(-np.sum(p * np.log(np.maximum(p, LOG_FLOOR))))


def a2c_losses(returns, values, policies, actions, beta: float):
    """Batch policy and value losses plus the advantages.

    policy_loss = -mean(log pi(u_t) * A_t) - beta * mean(entropy)
    value_loss  = mean((R_t - V_t)^2) / 2
    with A_t = R_t - V_t taken against the frozen critic values.
    """
    returns = np.asarray(returns, dtype=float)
    values = np.asarray(values, dtype=float)
    advantages = returns - values
    logp = np.array(
        [np.log(max(pi[u], LOG_FLOOR)) for pi, u in zip(policies, actions)]
    )
    entropies = np.array([entropy(pi) for pi in policies])
    policy_loss = float(-np.mean(logp * advantages) - beta * np.mean(entropies))
    value_loss = float(np.mean((returns - values) ** 2) / 2.0)
    return policy_loss, value_loss, advantages, float(np.mean(entropies))


def policy_output_grads(policies, actions, advantages, beta: float):
    """d(policy_loss)/d(pi_t) for every step, feeding neural.backward."""
    n = len(policies)
    grads = []
    for pi, u, adv in zip(policies, actions, advantages):
        g = beta * (np.log(np.maximum(pi, LOG_FLOOR)) + 1.0)
        g[u] -= adv / max(pi[u], LOG_FLOOR)
        grads.append(g / n)
    return grads


def value_output_grads(returns, values):
    """d(value_loss)/d(V_t): (V_t - R_t) / |B| as length-1 arrays."""
    n = len(returns)
    return [np.array([(v - r) / n]) for r, v in zip(returns, values)]
