"""Acceptance suite: one test per criterion, each printing PASS/FAIL.

Criterion 6 trains six desk-scale runs (two algorithms, three seeds)
and dominates the suite's runtime; everything else finishes in
seconds. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from atsclab.agent_graph import build_agent_graph
from atsclab.harness import runner
from atsclab.harness.checkpoint import load_agent_docs, load_run_state
from atsclab.harness.config import RunConfig, validate_config
from atsclab.neural import GroupSpec, LayerSpec, backward, init_params
from atsclab.rl import (
    EpsilonSchedule,
    LayerSizes,
    Trainer,
    estimate_returns,
    normalize_clip_reward,
    normalize_clip_state,
    spatial_discount_reward,
)
from atsclab.traffic import GridParams, TrafficSim, build_grid_scenario

from test_neural import fd_gradients, max_rel_error, run_sequence
from test_rewards_returns import brute_force_discount, summation_oracle


def report(criterion, name, ok, detail=""):
    print(f"\nACCEPTANCE {criterion} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {criterion} ({name}) failed: {detail}"


# ------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    for case in range(20):
        head = "softmax" if case % 2 == 0 else "linear"
        head_dim = int(rng.integers(2, 6)) if head == "softmax" else 1
        groups = [GroupSpec("wave", int(rng.integers(2, 5)), int(rng.integers(2, 5))),
                  GroupSpec("wait", int(rng.integers(2, 5)), int(rng.integers(2, 5)))]
        if case % 3 == 0:
            groups.append(GroupSpec("fingerprint", int(rng.integers(2, 5)), 0))
        spec = LayerSpec(tuple(groups), "lstm", int(rng.integers(2, 5)), head, head_dim)
        params = init_params(spec, rng)
        seq = [{g.name: rng.normal(size=g.input_dim) for g in spec.groups} for _ in range(3)]
        resets = [True, bool(rng.random() < 0.3), False]
        weights = [rng.normal(size=head_dim) for _ in range(3)]
        _, caches = run_sequence(params, spec, seq, resets)
        analytic = backward(params, spec, caches, weights)
        numeric = fd_gradients(params, spec, seq, resets, weights, h=1e-5)
        worst = max(worst, max_rel_error(analytic, numeric))
    elapsed = time.time() - t0
    report(1, "gradient-correctness", worst <= 1e-4 and elapsed < 60,
           f"(max rel err {worst:.2e}, {elapsed:.1f}s)")


# ------------------------------------------------------------- criterion 2


def test_criterion_2_return_oracle():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 13))
        rewards = rng.normal(size=k) * 3.0
        gamma = float(rng.random())
        bootstrap = float(rng.normal() * 5.0)
        dones = [bool(rng.random() < 0.25) for _ in range(k)]
        got = estimate_returns(rewards, dones, gamma, bootstrap)
        want = summation_oracle(rewards, dones, gamma, bootstrap)
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.time() - t0
    report(2, "return-oracle", worst <= 1e-10 and elapsed < 10,
           f"(max |diff| {worst:.2e}, {elapsed:.1f}s)")


# ------------------------------------------------------------- criterion 3


def test_criterion_3_spatial_discount_oracle():
    t0 = time.time()
    rng = np.random.default_rng(303)
    exact = True
    for _ in range(500):
        n = int(rng.integers(1, 9))
        possible = [(i, j) for i in range(n) for j in range(i + 1, n)]
        edges = [e for e in possible if rng.random() < 0.4]
        graph = build_agent_graph(edges, n)
        rewards = rng.normal(size=n) * 10.0
        for alpha in (0.0, 0.5, 0.75, 1.0):
            for i in range(n):
                mine = spatial_discount_reward(graph, rewards, i, alpha)
                oracle = brute_force_discount(n, edges, rewards, i, alpha)
                exact = exact and (mine == oracle)
        # endpoint identities
        i = int(rng.integers(n))
        exact = exact and spatial_discount_reward(graph, rewards, i, 0.0) == rewards[i]
        exact = exact and spatial_discount_reward(graph, rewards, i, 1.0) == brute_force_discount(
            n, edges, rewards, i, 1.0
        )
    elapsed = time.time() - t0
    report(3, "spatial-discount-oracle", exact and elapsed < 10, f"({elapsed:.1f}s)")


# ------------------------------------------------------------- criterion 4


def test_criterion_4_simulator_conservation_and_determinism():
    t0 = time.time()
    scenario = build_grid_scenario(5)
    cfg = validate_config(RunConfig(episode_steps=720))
    conserved = True
    identical = True
    for seed in range(5):
        csvs = []
        for repeat in range(2):
            sim = TrafficSim(scenario, runner.sim_params(cfg))
            ctrl = runner.make_baseline_controller("greedy", cfg, scenario)
            obs = sim.reset(seed)
            ctrl.reset()
            rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
            lines = []
            prev_completed = 0
            for step in range(720):
                actions = ctrl.act(obs, step, rng)
                obs, rewards, info = sim.step(actions)
                conserved = conserved and (
                    info["spawned"] == info["in_network"] + info["completed"]
                )
                snap = sim.snapshot_metrics()
                lines.append(
                    f"{step},{float(np.sum(rewards))!r},{snap.avg_queue!r},{snap.avg_delay!r},"
                    f"{snap.avg_speed!r},{snap.completed},{snap.accumulation}"
                )
                prev_completed = snap.completed
            csvs.append("\n".join(lines).encode())
        identical = identical and csvs[0] == csvs[1]
    elapsed = time.time() - t0
    report(4, "conservation-and-determinism",
           conserved and identical and elapsed < 120, f"({elapsed:.1f}s)")


# ------------------------------------------------------------- criterion 5


def test_criterion_5_constants():
    cfg = RunConfig()
    checks = {
        "wave_norm": cfg.wave_norm == 5.0,
        "wait_norm": cfg.wait_norm == 100.0,
        "reward_norm": cfg.reward_norm == 2000.0,
        "state_clip": cfg.state_clip == 2.0,
        "reward_clip": cfg.reward_clip == 2.0,
        "grad_clip": cfg.grad_clip == 40.0,
        "step_seconds": cfg.step_seconds == 5,
        "yellow_seconds": cfg.yellow_seconds == 2,
        "gamma": cfg.gamma == 0.99,
        "alpha": cfg.alpha == 0.75,
        "beta": cfg.beta == 0.01,
        "batch_steps": cfg.batch_steps == 120,
        "episode_steps": cfg.episode_steps == 720,
        "actor_lr": cfg.actor_lr == 5e-4,
        "critic_lr": cfg.critic_lr == 2.5e-4,
        "reward_coef": cfg.reward_coef == 0.2,
        "iql_lr": cfg.iql.lr == 1e-4,
        "iql_batch": cfg.iql.batch_size == 20,
        "replay": cfg.iql.replay_size == 1000,
        "total_steps": cfg.total_steps == 1_000_000,
    }
    # the divisions and clips themselves
    checks["wave_division"] = np.array_equal(
        normalize_clip_state([2.5, 10.0, 999.0], cfg.wave_norm, cfg.state_clip),
        [0.5, 2.0, 2.0],
    )
    checks["wait_division"] = np.array_equal(
        normalize_clip_state([50.0, 400.0], cfg.wait_norm, cfg.state_clip), [0.5, 2.0]
    )
    checks["reward_division"] = normalize_clip_reward(-1000.0, cfg.reward_norm, cfg.reward_clip) == -0.5
    checks["reward_clip_low"] = normalize_clip_reward(-1e9, cfg.reward_norm, cfg.reward_clip) == -2.0
    sched = EpsilonSchedule(cfg.iql.eps_start, cfg.iql.eps_end, cfg.total_steps // 2)
    checks["eps_start"] = sched.value(0) == 1.0
    checks["eps_end"] = sched.value(cfg.total_steps // 2) == 0.01
    checks["eps_mid"] = abs(sched.value(cfg.total_steps // 4) - 0.505) < 1e-12
    bad = [k for k, ok in checks.items() if not ok]
    report(5, "stock-constants", not bad, f"(violations: {bad})" if bad else "")


# ------------------------------------------------------------- criterion 6


def desk_config(agent: str, seed: int) -> RunConfig:
    """Desk-scale setup: scenario-scaled normalization and learning rates
    (the stock values target the full-size grid and a 1M-step budget)."""
    return validate_config(
        RunConfig(
            agent=agent,
            seed=seed,
            episode_steps=240,
            batch_steps=40,
            gamma=0.9,
            reward_norm=200.0,
            wave_norm=15.0,
            wait_norm=200.0,
            critic_lr=2.5e-3,
            actor_lr=1e-3,
            total_steps=100_000,
            layers=LayerSizes(wave=32, wait=16, fingerprint=16, core=32),
            checkpoint_every=0,
        )
    )


def desk_scenario():
    return build_grid_scenario(3, GridParams(episode_seconds=1200.0))


def _train_desk(job):
    agent, seed = job
    t0 = time.time()
    trainer = Trainer(desk_config(agent, seed), desk_scenario())
    trainer.run(100_000)
    rbars = [float(row.split(",")[2]) for row in trainer.episode_rows]
    return agent, seed, rbars, time.time() - t0


def _baseline_mean(kind: str, seed: int, episodes: int = 20) -> float:
    cfg = desk_config("ma2c", seed)
    scenario = desk_scenario()
    sim = TrafficSim(scenario, runner.sim_params(cfg))
    ctrl = runner.make_baseline_controller(kind, cfg, scenario)
    rbars = []
    for k in range(episodes):
        rows, _ = runner.run_episode(cfg, sim, ctrl, seed=seed * 1000 + k)
        rbars.append(float(np.mean([r["reward"] for r in rows])))
    return float(np.mean(rbars))


def test_criterion_6_desk_scale_learning():
    t0 = time.time()
    seeds = (0, 1, 2)
    jobs = [("ma2c", s) for s in seeds] + [("ia2c", s) for s in seeds]
    workers = min(2, os.cpu_count() or 1)
    results = {}
    times = {}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for agent, seed, rbars, wall in pool.map(_train_desk, jobs):
            results[(agent, seed)] = rbars
            times[(agent, seed)] = wall

    random_means = [_baseline_mean("random", s) for s in seeds]
    greedy_means = [_baseline_mean("greedy", s) for s in seeds]

    def final20(agent, seed):
        return float(np.mean(results[(agent, seed)][-20:]))

    ma2c_finals = [final20("ma2c", s) for s in seeds]
    ia2c_finals = [final20("ia2c", s) for s in seeds]
    ma2c_mean = float(np.mean(ma2c_finals))
    ia2c_mean = float(np.mean(ia2c_finals))
    random_mean = float(np.mean(random_means))

    improvement = (ma2c_mean - random_mean) / abs(random_mean)
    cond_a = improvement >= 0.30

    pooled_std = float(
        np.sqrt((np.var(ma2c_finals, ddof=1) + np.var(ia2c_finals, ddof=1)) / 2.0)
    )
    cond_b = ma2c_mean >= ia2c_mean - pooled_std

    firsts, lasts = [], []
    for s in seeds:
        rbars = results[("ma2c", s)]
        q = len(rbars) // 4
        firsts.append(float(np.mean(rbars[:q])))
        lasts.append(float(np.mean(rbars[-q:])))
    cond_c = float(np.mean(lasts)) > float(np.mean(firsts))

    per_seed_budget = all(wall <= 30 * 60 for wall in times.values())

    print(f"\n  MA2C final-20 means {np.round(ma2c_finals, 1)} -> {ma2c_mean:.1f}")
    print(f"  IA2C final-20 means {np.round(ia2c_finals, 1)} -> {ia2c_mean:.1f}")
    print(f"  RANDOM means {np.round(random_means, 1)} -> {random_mean:.1f}"
          f" | GREEDY {np.round(greedy_means, 1)}")
    print(f"  (a) improvement over random {improvement:.1%} (need >= 30%)")
    print(f"  (b) MA2C {ma2c_mean:.1f} >= IA2C {ia2c_mean:.1f} - pooled std {pooled_std:.1f}")
    print(f"  (c) training curve first-quartile {np.mean(firsts):.1f}"
          f" -> last-quartile {np.mean(lasts):.1f}")
    print(f"  wall times per run: {[f'{v/60:.1f}min' for v in times.values()]}")
    report(6, "desk-scale-learning", cond_a and cond_b and cond_c and per_seed_budget,
           f"(a={cond_a} b={cond_b} c={cond_c}, total {(time.time()-t0)/60:.1f}min)")


# ------------------------------------------------------------- criterion 7


def test_criterion_7_minibatch_structure():
    t0 = time.time()
    scenario = build_grid_scenario(2, GridParams(episode_seconds=3600.0))
    records = []
    cfg = validate_config(
        RunConfig(
            agent="ma2c",
            batch_steps=120,
            episode_steps=720,
            total_steps=1500,
            layers=LayerSizes(wave=6, wait=6, fingerprint=6, core=6),
            checkpoint_every=0,
        )
    )
    rounds_at_episode_end = []
    trainer = Trainer(cfg, scenario, update_hook=lambda rnd, i, s: records.append((rnd, i, s)))
    while trainer.episode < 2 and trainer.global_step < 1500:
        steps_before = trainer.update_rounds
        trainer.step_once()
        if trainer.t == 0 and trainer.global_step > 0 and trainer.episode > len(rounds_at_episode_end):
            rounds_at_episode_end.append(trainer.update_rounds)
    # 720 / 120 = exactly 6 update rounds per episode, aligned to the horizon
    six_per_episode = rounds_at_episode_end[:2] == [6, 12]
    aligned = all(
        (s.splits == 0) or (s.splits == 1 and s.dones[-1]) for _, _, s in records
    )

    # randomized reset offsets: every update's returns match the oracle
    rng = np.random.default_rng(7)
    split_ok = True
    saw_mid_reset = False
    for trial in range(3):
        T = int(rng.integers(5, 14))
        B = int(rng.integers(4, 11))
        cfg2 = validate_config(
            RunConfig(
                agent="ma2c",
                batch_steps=B,
                episode_steps=T,
                total_steps=6 * B,
                gamma=float(rng.choice([0.0, 0.5, 0.99])),
                layers=LayerSizes(wave=4, wait=4, fingerprint=4, core=4),
                checkpoint_every=0,
                seed=trial,
            )
        )
        recs = []
        tr = Trainer(cfg2, scenario, update_hook=lambda rnd, i, s: recs.append(s))
        tr.run(6 * B)
        for s in recs:
            want = summation_oracle(s.rewards, s.dones, cfg2.gamma, s.bootstrap)
            split_ok = split_ok and float(np.max(np.abs(s.returns - want))) <= 1e-10
            saw_mid_reset = saw_mid_reset or any(s.dones[:-1])
    elapsed = time.time() - t0
    report(7, "minibatch-structure",
           six_per_episode and aligned and split_ok and saw_mid_reset,
           f"(6/episode={six_per_episode}, splits-vs-oracle={split_ok}, {elapsed:.1f}s)")


# ------------------------------------------------------------- criterion 8


def test_criterion_8_resume_equivalence(tmp_path):
    t0 = time.time()
    scenario = build_grid_scenario(2, GridParams(episode_seconds=3600.0))
    scen_path = tmp_path / "grid2.json"
    scenario.save(scen_path)

    def cfg():
        return validate_config(
            RunConfig(
                agent="ma2c",
                scenario=str(scen_path),
                total_steps=1000,
                checkpoint_every=500,
                layers=LayerSizes(wave=8, wait=8, fingerprint=8, core=8),
            )
        )

    d_full = runner.run_training(cfg(), scenario, str(tmp_path / "full"))
    d_half = runner.run_training(cfg(), scenario, str(tmp_path / "half"), max_steps=500)
    d_res = runner.run_training(
        cfg(), scenario, str(tmp_path / "half"),
        resume_from=os.path.join(d_half, "checkpoints", "step_500"),
    )
    same_csv = (
        open(os.path.join(d_full, "training.csv"), "rb").read()
        == open(os.path.join(d_res, "training.csv"), "rb").read()
    )
    full_agents = load_agent_docs(os.path.join(d_full, "checkpoints", "final"))
    res_agents = load_agent_docs(os.path.join(d_res, "checkpoints", "final"))
    same_params = all(
        a["actor"] == b["actor"] and a["critic"] == b["critic"]
        for a, b in zip(full_agents, res_agents)
    )
    full_state = load_run_state(os.path.join(d_full, "checkpoints", "final"))
    res_state = load_run_state(os.path.join(d_res, "checkpoints", "final"))
    same_state = full_state == res_state
    elapsed = time.time() - t0
    report(8, "resume-equivalence",
           same_csv and same_params and same_state and elapsed < 300,
           f"(csv={same_csv} params={same_params} state={same_state}, {elapsed:.1f}s)")
