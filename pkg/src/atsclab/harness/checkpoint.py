"""Checkpoint directory layout: one document per agent plus run state.

A checkpoint directory holds agent_XX.json files (network parameters,
optimizer accumulators, and whatever per-agent buffers the algorithm
needs) and run_state.json (counters, RNG states, full simulator state,
fingerprints). Every document carries the config digest so stale
checkpoints are refused instead of silently reused.
"""

from __future__ import annotations

import json
import os

AGENT_FORMAT = "atsclab-agent-v1"
RUN_FORMAT = "atsclab-runstate-v1"


class CheckpointError(ValueError):
    """Raised for missing or mismatched checkpoint documents."""


def _dump(path, doc):
    with open(path, "w", newline="\n") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def save_checkpoint(ckpt_dir, trainer, digest: str):
    os.makedirs(ckpt_dir, exist_ok=True)
    doc = trainer.state_doc()
    doc.pop("format", None)
    agents = doc.pop("agents")
    for i, agent_doc in enumerate(agents):
        agent_doc = {"format": AGENT_FORMAT, "config_digest": digest, "agent": i, **agent_doc}
        _dump(os.path.join(ckpt_dir, f"agent_{i:03d}.json"), agent_doc)
    doc = {"format": RUN_FORMAT, "config_digest": digest, "n_agents": len(agents), **doc}
    _dump(os.path.join(ckpt_dir, "run_state.json"), doc)
    return ckpt_dir


def load_agent_docs(ckpt_dir) -> list[dict]:
    run = load_run_state(ckpt_dir)
    docs = []
    for i in range(int(run["n_agents"])):
        path = os.path.join(ckpt_dir, f"agent_{i:03d}.json")
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as err:
            raise CheckpointError(f"missing agent document {path}: {err}") from err
        if doc.get("format") != AGENT_FORMAT:
            raise CheckpointError(f"{path}: unexpected format {doc.get('format')!r}")
        docs.append(doc)
    return docs


def load_run_state(ckpt_dir) -> dict:
    path = os.path.join(ckpt_dir, "run_state.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as err:
        raise CheckpointError(f"missing run state {path}: {err}") from err
    if doc.get("format") != RUN_FORMAT:
        raise CheckpointError(f"{path}: unexpected format {doc.get('format')!r}")
    return doc


def restore_trainer(trainer, ckpt_dir):
    run = load_run_state(ckpt_dir)
    agents = load_agent_docs(ckpt_dir)
    doc = dict(run)
    doc["format"] = "atsclab-train-v1"
    doc["agents"] = agents
    trainer.restore(doc)
    return run["config_digest"]


def checkpoint_digest(ckpt_dir) -> str:
    return load_run_state(ckpt_dir)["config_digest"]
