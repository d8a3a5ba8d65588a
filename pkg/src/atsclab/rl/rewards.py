"""Spatial discounting and observation-to-feature plumbing.

Rewards of other agents are attenuated per hop of graph distance;
neighbor observation blocks get the same attenuation after
normalization. The FeaturePipeline turns raw per-agent (wave, wait)
measurements plus neighbor policy fingerprints into the named input
groups the networks consume, with a fixed ordering: own block first,
then neighbors ascending by agent id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atsclab.agent_graph import AgentNetwork


def spatial_discount_reward(graph: AgentNetwork, rewards, i: int, alpha: float) -> float:
    """sum over d of alpha^d * (sum of rewards at hop distance d from i).

    Agents unreachable from i are skipped. alpha=0 reduces to the own
    reward, alpha=1 to the plain global sum over the component.
    Summation runs in ascending distance and ascending agent id so the
    result is bit-reproducible.
    """
    total = 0.0
    for d, members in graph.rings[i]:
        ring = 0.0
        for j in members:
            ring += float(rewards[j])
        total += alpha**d * ring
    return total


def spatial_discount_all(graph: AgentNetwork, rewards, alpha: float) -> np.ndarray:
    return np.array(
        [spatial_discount_reward(graph, rewards, i, alpha) for i in range(graph.n_agents)]
    )


def discount_neighbor_state(blocks: list[np.ndarray], alpha: float) -> np.ndarray:
    """Concatenate local-region blocks, own block first and unscaled."""
    if not blocks:
        return np.zeros(0)
    scaled = [np.asarray(blocks[0], dtype=float)]
    scaled += [alpha * np.asarray(b, dtype=float) for b in blocks[1:]]
    return np.concatenate(scaled)


def normalize_clip_state(x, norm: float, clip: float) -> np.ndarray:
    """Divide by norm, clip to [0, clip]."""
    return np.clip(np.asarray(x, dtype=float) / norm, 0.0, clip)


def normalize_clip_reward(r: float, norm: float, clip: float) -> float:
    """Divide by norm, clip to [-clip, clip]."""
    return float(np.clip(r / norm, -clip, clip))


@dataclass(frozen=True)
class FeatureConfig:
    wave_norm: float = 5.0  # veh
    wait_norm: float = 100.0  # s
    state_clip: float = 2.0
    alpha: float = 0.75
    use_fingerprints: bool = True
    use_spatial_discount: bool = True


class FeaturePipeline:
    """Builds named network inputs from raw observations and fingerprints."""

    def __init__(self, graph: AgentNetwork, lane_counts, action_counts, cfg: FeatureConfig):
        self.graph = graph
        self.lane_counts = tuple(lane_counts)
        self.action_counts = tuple(action_counts)
        self.cfg = cfg

    def group_dims(self, i: int) -> dict[str, int]:
        region = self.graph.local_region(i)
        state_dim = sum(self.lane_counts[j] for j in region)
        dims = {"wave": state_dim, "wait": state_dim}
        if self.cfg.use_fingerprints and self.graph.neighbors(i):
            dims["fingerprint"] = sum(self.action_counts[j] for j in self.graph.neighbors(i))
        return dims

    def uniform_fingerprints(self) -> list[np.ndarray]:
        """Start-of-episode policy priors: uniform over each agent's phases."""
        return [np.full(n, 1.0 / n) for n in self.action_counts]

    def inputs_for(self, i: int, observations, fingerprints) -> dict[str, np.ndarray]:
        cfg = self.cfg
        alpha = cfg.alpha if cfg.use_spatial_discount else 1.0
        region = self.graph.local_region(i)
        waves = [
            normalize_clip_state(observations[j].wave, cfg.wave_norm, cfg.state_clip)
            for j in region
        ]
        waits = [
            normalize_clip_state(observations[j].wait, cfg.wait_norm, cfg.state_clip)
            for j in region
        ]
        inputs = {
            "wave": discount_neighbor_state(waves, alpha),
            "wait": discount_neighbor_state(waits, alpha),
        }
        neigh = self.graph.neighbors(i)
        if cfg.use_fingerprints and neigh:
            inputs["fingerprint"] = np.concatenate([fingerprints[j] for j in neigh])
        return inputs
