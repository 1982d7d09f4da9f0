"""Acceptance criteria 1-9.

Each test prints one ``[criterion N] PASS|FAIL: ...`` line; the lines are
repeated together in pytest's terminal summary. Criteria 7 and 8 run full
100-seed batteries and DQN training; they carry the ``slow`` marker and are
skipped by the default ``pytest`` run. Run them with ``pytest -m slow``.

Set ``REPLAN_NAV_ACCEPTANCE_CACHE`` to a directory to keep the trained
networks of criterion 8 between runs.
"""
import math
import os
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from replan_nav.bench import make_policy, run_battery, run_episode
from replan_nav.drl import (DQNTrainer, PrioritizedReplay, PrioritizedTransition, PriorityMode, QNetwork,
                            TrainerConfig, P_MIN, priorities, save_weights)
from replan_nav.errors import InitialPlanFailed
from replan_nav.global_plan import build_costmap, chain_moves, dijkstra_cells, plan_dijkstra, rrt_star_best_cost
from replan_nav.local_plan import ControlCommand, dwa_command, dynamic_window
from replan_nav.replan_env import Action, ReplanEnv, build_observation, sgt_score
from replan_nav.sim_world import ObstacleState, Pose2D, PrebuiltMap, WorldState, sense
from replan_nav.traces import replay

from test_global_plan import bellman_ford
from test_local_plan import CFG, ScalarScorer, random_state


VERDICTS: list[str] = []  # echoed in the terminal summary by conftest.py


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, detail


class Halt:
    def reset(self, seed):
        pass

    def command(self, *args):
        return ControlCommand(0.0, 0.0)


def start_env(seed, env=None):
    env = env or ReplanEnv(16)
    while True:
        try:
            env.reset(seed)
            return env
        except InitialPlanFailed:
            seed += 10_000


# --------------------------------------------------------------------------- 1

def test_criterion_1_timing_law():
    rng = np.random.default_rng(1)
    env = ReplanEnv(16)
    bad, steps, lengths = [], 0, (1, 11)
    for i in range(1000):
        start_env(i, env)
        n_not = n_rep = 0
        for _ in range(3):
            a = Action(int(rng.integers(2)))
            t0 = env.world.tick
            r = env.step(a)
            steps += 1
            want = lengths[int(a)]
            took = env.world.tick - t0
            ended = r.terminated or r.truncated
            if took != r.ticks or r.elapsed != took * env.cfg.dt or (took != want and not (ended and took < want)):
                bad.append((i, int(a), took))
            n_not += a == Action.NO_REPLAN
            n_rep += a == Action.REPLAN
            if ended:
                break
        if not env.done and env.world.tick != n_not + 11 * n_rep:
            bad.append((i, "total", env.world.tick))
    verdict(1, not bad, f"1000 random sequences, {steps} steps, NO_REPLAN = 1 tick (0.1 s), "
                        f"REPLAN = 11 ticks (1.1 s); violations: {bad[:5]}")


# --------------------------------------------------------------------------- 2

def rot90(p, k, c=(10.0, 10.0)):
    x, y = p[0] - c[0], p[1] - c[1]
    for _ in range(k):
        x, y = -y, x
    return (x + c[0], y + c[1])


def rotated_world(w: WorldState, k: int) -> WorldState:
    obs = tuple(ObstacleState(rot90(o.position, k), rot90(o.velocity, k, (0.0, 0.0)), o.radius, o.kind,
                              rot90(o.waypoint, k), o.desired_speed) for o in w.obstacles)
    x, y = rot90((w.robot.x, w.robot.y), k)
    return WorldState(Pose2D(x, y, w.robot.theta + k * math.pi / 2), w.v, w.omega, obs, w.map,
                      rot90(w.goal, k), w.tick, w.rng)


def test_criterion_2_observation_contract():
    worst, n_obs, shapes_ok = 0.0, 0, True
    # whole-world quarter turns about the field centre: the pillar lattice maps onto itself
    for seed in range(20):
        env = start_env(seed)
        for _ in range(5):
            env.step(Action.NO_REPLAN)
            if env.done:
                break
        if env.done:
            continue
        base = env.observe()
        traj = env.trajectory_points()
        for k in (1, 2, 3):
            w2 = rotated_world(env.world, k)
            scan = sense(w2)
            path = np.array([rot90(p, k) for p in env.path.waypoints])
            tr = np.array([rot90(p, k) for p in traj])
            o2 = build_observation(w2.robot.x, w2.robot.y, w2.robot.theta, scan.ranges, path, tr, w2.goal, env.cfg)
            worst = max(worst, float(np.abs(o2 - base).max()))
            n_obs += 1
    # arbitrary rotations and translations of every input
    rng = np.random.default_rng(2)
    for _ in range(500):
        x, y, th = rng.uniform(2, 18), rng.uniform(2, 18), rng.uniform(-math.pi, math.pi)
        ranges = rng.uniform(0.3, 10, 180)
        path = np.cumsum(rng.normal(size=(8, 2)), axis=0) + [x, y]
        traj = rng.uniform(0, 20, (5, 2))
        goal = rng.uniform(0, 20, 2)
        base = build_observation(x, y, th, ranges, path, traj, goal, env.cfg)
        phi, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-30, 30, 2)
        c, s = math.cos(phi), math.sin(phi)
        R = np.array([[c, -s], [s, c]])
        move = lambda p: (np.atleast_2d(p) - [x, y]) @ R.T + [x, y] + shift  # noqa: E731
        o2 = build_observation(x + shift[0], y + shift[1], th + phi, ranges, move(path), move(traj),
                               move(goal)[0], env.cfg)
        worst = max(worst, float(np.abs(o2 - base).max()))
        shapes_ok &= base.shape == (62,) and bool(np.isfinite(base).all())
        n_obs += 1
    # a robot held still for 5 s
    env = start_env(4)
    env.lp = Halt()
    for _ in range(50):
        r = env.step(Action.NO_REPLAN)
    still = r.observation[50:60].reshape(5, 2)
    still_ok = bool(np.all(still == still[0]) and np.all(still == 0.0)) and not env.collision
    ok = worst <= 1e-9 and shapes_ok and still_ok
    verdict(2, ok, f"62 finite components; max deviation under rigid motion {worst:.2e} over {n_obs} cases; "
                   f"stationary 5 s gives five coincident points: {still_ok}")


# --------------------------------------------------------------------------- 3

def test_criterion_3_sgt_bounds():
    ex = [sgt_score(True, 100.0, 20.0, 4, 8), sgt_score(True, 10.0, 20.0, 4, 8), sgt_score(True, 400.0, 20.0, 4, 8)]
    examples_ok = ex == [20.0 / 100.0, 20.0 / 80.0, 20.0 / 160.0]
    rng = np.random.default_rng(3)
    vals = [sgt_score(bool(rng.integers(2)), rng.uniform(0, 1000), rng.uniform(0.1, 50), 4.0, 8.0)
            for _ in range(100_000)]
    rewards = []
    for seed in range(6):
        env = ReplanEnv(16)
        try:
            r = run_episode(env, make_policy("time"), seed)
        except InitialPlanFailed:
            continue
        rewards.append(env.reward_total)
        assert (env.reward_total != 0) == r.success
    inside = all(v == 0.0 or 0.125 <= v <= 0.25 for v in vals + rewards)
    verdict(3, examples_ok and inside, f"examples {ex}; {len(vals)} random and {len(rewards)} episode rewards "
                                       f"all in {{0}} U [0.125, 0.25]: {inside}")


# --------------------------------------------------------------------------- 4

def test_criterion_4_planner_oracles():
    rng = np.random.default_rng(4)
    dij_bad = dij_n = 0
    for _ in range(200):
        occ = rng.random((20, 20)) < 0.3
        free = np.argwhere(~occ)
        s, g = map(tuple, free[rng.choice(len(free), 2, replace=False)])
        want = bellman_ford(occ, s, g)
        if math.isinf(want):
            continue
        n_str, n_diag = chain_moves(dijkstra_cells(occ, s, g))
        dij_bad += abs(n_str + math.sqrt(2) * n_diag - want) > 1e-9
        dij_n += 1

    m = PrebuiltMap.pillar_grid(16)
    dwa_bad = dwa_n = 0
    while dwa_n < 100:
        pose, v, omega, scan = random_state(rng, m)
        cm = build_costmap(m, scan)
        try:
            path = plan_dijkstra(cm, pose.xy, (18.0, 18.0) if pose.x < 10 else (2.0, 2.0))
        except Exception:
            continue
        scorer = ScalarScorer(m, cm)
        vs, ws = dynamic_window(v, omega, CFG)
        table = {(a, b): scorer.score(path, pose, a, b) for a in vs for b in ws}
        best = max(table.values())
        top = [k for k, sc in table.items() if sc >= best - 1e-9]
        forward = any(math.isfinite(sc) for (a, _), sc in table.items() if a > 0)
        if not forward or (abs(v) < 1e-9 and all(a == 0 for a, _ in top)):
            continue  # turn-in-place recovery, outside the argmax contract
        cmd = dwa_command(path, pose, v, omega, cm, CFG)
        dwa_bad += table.get((cmd.v, cmd.omega), -math.inf) < best - 1e-9
        dwa_n += 1

    cm = build_costmap(PrebuiltMap.pillar_grid(9))
    rrt_ok = True
    for seed in range(3):
        c = [rrt_star_best_cost(cm, (2.0, 2.0), (18.0, 18.0), seed, n) for n in (500, 2000, 8000)]
        rrt_ok &= c[0] >= c[1] >= c[2]
    ok = dij_bad == 0 and dwa_bad == 0 and rrt_ok
    verdict(4, ok, f"Dijkstra = Bellman-Ford on {dij_n} reachable lattices ({dij_bad} off); "
                   f"DWA = scalar argmax on {dwa_n} states ({dwa_bad} off); RRT* anytime non-increasing: {rrt_ok}")


# --------------------------------------------------------------------------- 5

def test_criterion_5_gradient_check():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        net = QNetwork.create(rng, dtype=np.float64)
        x = rng.normal(size=(16, 62))
        a = rng.integers(0, 2, 16)
        y = rng.normal(size=16)
        rows = np.arange(16)

        def loss():
            return float(np.mean((net.forward(x)[rows, a] - y) ** 2))

        q, acts = net.forward(x, keep=True)
        g = np.zeros_like(q)
        g[rows, a] = 2 * (q[rows, a] - y) / 16
        grads = np.concatenate([p.ravel() for p in net.backward(acts, g)])
        flat = net.get_flat()
        for i in rng.choice(len(flat), 50, replace=False):
            h = 1e-5
            f = flat.copy()
            f[i] += h
            net.set_flat(f)
            lp = loss()
            f[i] -= 2 * h
            net.set_flat(f)
            lm = loss()
            net.set_flat(flat)
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[i]) / max(abs(fd), abs(grads[i]), 1e-8))
    verdict(5, worst < 1e-4, f"max relative error {worst:.2e} over 50 parameters x 10 batches")


# --------------------------------------------------------------------------- 6

def test_criterion_6_per_semantics():
    rng = np.random.default_rng(6)
    buf = PrioritizedReplay(50, 62, alpha=0.6)
    p = rng.uniform(0.01, 5.0, 50)
    for k in range(50):
        buf.add(PrioritizedTransition(np.zeros(62), 0, 0.0, np.zeros(62), False, False, p[k]))
    idx, _ = buf.sample(100_000, np.random.default_rng(60))
    counts = np.bincount(idx, minlength=50)
    expect = p ** 0.6 / (p ** 0.6).sum() * 100_000
    pval = stats.chisquare(counts, expect).pvalue
    exact = True
    for _ in range(20):
        net = QNetwork.create(rng)
        obs = rng.normal(size=(32, 62)).astype(np.float32)
        q = net.forward(obs).astype(np.float64)
        got = priorities(net, None, obs, np.zeros(32), np.zeros(32), obs, np.zeros(32), PriorityMode.Q_DIFF)
        exact &= bool(np.array_equal(got, np.abs(q[:, 1] - q[:, 0]) + P_MIN))
    verdict(6, pval > 0.01 and exact, f"chi-square p = {pval:.3f} over 1e5 draws; Q_DIFF priority exact: {exact}")


# --------------------------------------------------------------------------- 7 and 8

SEEDS = 100


@lru_cache(maxsize=None)
def rule_battery(strategy: str):
    return run_battery(16, "dijkstra", "dwa", strategy, SEEDS, 0)


@pytest.mark.slow
def test_criterion_7_table_one_directions():
    r = {s: rule_battery(s) for s in ("none", "distance", "stuck", "time", "time_patience")}
    a = r["time"].NR > 3 * r["stuck"].NR
    periodic = ("distance", "time", "time_patience")
    b = all(r[s].SR >= r["none"].SR + 15 for s in periodic)
    c = abs(r["stuck"].SR - r["time"].SR) <= 15
    table = ", ".join(f"{s} SR {rep.SR:.1f} NR {rep.NR}" for s, rep in r.items())
    verdict(7, a and b and c, f"(a) {a} (b) {b} (c) {c}; {table}; aborted seeds {r['none'].aborted}")


def cache_dir(tmp_path_factory) -> Path:
    d = os.environ.get("REPLAN_NAV_ACCEPTANCE_CACHE")
    return Path(d) if d else tmp_path_factory.mktemp("drl")


def trained_weights(mode: str, seed: int, where: Path) -> Path:
    path = where / f"{mode}_{seed}.bin"
    if not path.exists():
        # 20k steps instead of 100k: exploration decays over the first fifth, as in the full schedule
        cfg = TrainerConfig(total_steps=20_000, eps_decay_steps=4_000, priority_mode=mode, seed=seed)
        trainer = DQNTrainer(ReplanEnv(16), cfg)
        trainer.train()
        save_weights(trainer.net, path)
    return path


@pytest.mark.slow
def test_criterion_8_learned_replanner(tmp_path_factory):
    where = cache_dir(tmp_path_factory)
    where.mkdir(parents=True, exist_ok=True)
    reps = {}
    for mode in ("q_diff", "uniform"):
        for seed in (0, 1, 2):
            w = trained_weights(mode, seed, where)
            reps[mode, seed] = run_battery(16, "dijkstra", "dwa", "drl", SEEDS, 0, weights=str(w))
    sr = {m: float(np.mean([reps[m, s].SR for s in (0, 1, 2)])) for m in ("q_diff", "uniform")}
    nr = float(np.mean([reps["q_diff", s].NR for s in (0, 1, 2)]))
    stuck, time_ = rule_battery("stuck"), rule_battery("time")
    a = sr["q_diff"] >= stuck.SR - 5
    b = nr <= time_.NR
    c = sr["q_diff"] >= sr["uniform"]
    verdict(8, a and b and c,
            f"DRL (Q_DIFF) mean SR {sr['q_diff']:.1f} vs stuck {stuck.SR:.1f} - 5: {a}; "
            f"mean NR {nr:.0f} vs time {time_.NR}: {b}; UNIFORM mean SR {sr['uniform']:.1f}, Q_DIFF >= UNIFORM: {c}")


# --------------------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path):
    traces_ok = episodes_ok = True
    n_traces = 0
    net = QNetwork.create(np.random.default_rng(9))
    save_weights(net, tmp_path / "net.bin")
    for strategy in ("none", "distance", "stuck", "time", "time_patience", "drl"):
        for seed in (0, 1):
            paths = [tmp_path / f"{strategy}_{seed}_{k}.jsonl" for k in (0, 1)]
            results = []
            for p in paths:
                pol = make_policy(strategy, tmp_path / "net.bin" if strategy == "drl" else None)
                try:
                    results.append(run_episode(ReplanEnv(16), pol, seed, p, strategy))
                except InitialPlanFailed:
                    break
            if len(results) < 2:
                continue
            episodes_ok &= results[0] == results[1] and paths[0].read_bytes() == paths[1].read_bytes()
            replay(paths[0])  # raises on any divergence
            n_traces += 1
    for_run = []
    for _ in range(2):
        cfg = TrainerConfig(total_steps=300, warmup_steps=64, batch=16, target_sync_every=50, seed=4)
        tr = DQNTrainer(ReplanEnv(16), cfg)
        rows = tr.train(tmp_path / "log.csv")
        for_run.append((tr.net.get_flat().tobytes(), (tmp_path / "log.csv").read_bytes(), len(rows)))
    train_ok = for_run[0] == for_run[1]
    ok = traces_ok and episodes_ok and train_ok
    verdict(9, ok, f"{n_traces} episodes bit-identical on rerun and verified by replay: {episodes_ok}; "
                   f"training run bit-identical: {train_ok}")
