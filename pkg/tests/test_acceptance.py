"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced and repeated in the terminal
summary (see conftest.py). Budgets for the learning-driven criteria are set
in the constants below; they are desk-scale settings sized so the whole test
suite stays within roughly fifteen minutes on one CPU.
"""

import filecmp
import itertools
import json
import os
import time

import numpy as np
import pytest

from cyberposg import detector as det
from cyberposg.beam import beam_search, exhaustive_best
from cyberposg.cli import main
from cyberposg.doar import DoarConfig, doar_loop, measured_gap
from cyberposg.env import CyberEnv, EnvConfig, burn_in_samples, discounted_shaping
from cyberposg.experiments import (
    Scenario,
    SweepSpec,
    at_least,
    doar_strategies,
    grid_means,
    pairing_metrics,
    point_config,
    pure,
    resolve,
    run_cross_table,
    run_sweep,
    sweep_checks,
)
from cyberposg.learn import TrainConfig, make_critic, td_loss_and_grads
from cyberposg.model import (
    AttackerAction,
    BitLayout,
    ConfigReq,
    DeviceState,
    Role,
    apply_exploit_delta,
    make_exploit,
)
from cyberposg.nash import solve_nash
from cyberposg.netgraph import ChurnConfig, degree_slope, evolve, generate_initial
from cyberposg.policies import baseline, random_action
from cyberposg.rollout import derive_seeds

A, D = Role.ATTACKER, Role.DEFENDER
RESULTS: dict[int, str] = {}

# CYBERPOSG_ACCEPTANCE=full swaps in the larger (hours-scale) budgets
FULL = os.environ.get("CYBERPOSG_ACCEPTANCE", "quick") == "full"
BASELINES = dict(defender_baselines=("pass", "random", "preset"))
if FULL:
    VOLT_DOAR = DoarConfig(max_rounds=15, rollouts=30, episodes=200, **BASELINES)
    SWEEP_DOAR = DoarConfig(max_rounds=6, rollouts=20, episodes=100, **BASELINES)
else:
    VOLT_DOAR = DoarConfig(max_rounds=4, rollouts=10, episodes=30, train=TrainConfig(hidden=(64, 64)), **BASELINES)
    SWEEP_DOAR = DoarConfig(max_rounds=2, rollouts=8, episodes=30, train=TrainConfig(hidden=(64, 64)), **BASELINES)
EVAL_RUNS = 30


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)


# ---------------------------------------------------------------------------
# 1. State algebra
# ---------------------------------------------------------------------------


def test_criterion_01_state_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    L = BitLayout()
    fails = {"or": 0, "xor": 0, "restore": 0, "masking": 0}
    for _ in range(1000):
        x = DeviceState(0, rng.random(L.config_width) < 0.5, rng.random(L.compromise_width) < 0.3)
        e = make_exploit(L, int(rng.integers(L.exploit_slots)), "e", ConfigReq(), 0.5, root=bool(rng.random() < 0.5))
        y = apply_exploit_delta(x, e)
        fails["or"] += not np.all(y.compromise >= x.compromise)
        delta = rng.random(L.config_width) < 0.5
        fails["xor"] += not np.array_equal(x.config ^ delta ^ delta, x.config)
    env = CyberEnv()
    for case in range(1000):
        if case % 10 == 0:
            env.reset(case)
        n = env.cfg.max_devices
        env.checkpoint()
        saved = [(d.config.copy(), d.compromise.copy()) for d in env.devices]
        owned = {d.id for d in env.devices if d.attacker_owned}
        # masking: the defender never sees compromise bits, the attacker never sees anomaly scores
        before_d, before_a = env.observe(D), env.observe(A)
        i = int(rng.integers(n))
        env.devices[i].compromise = ~env.devices[i].compromise
        masked = np.array_equal(env.observe(D), before_d)
        env.devices[i].compromise = ~env.devices[i].compromise
        scores = [d.anomaly_score for d in env.devices]
        for d in env.devices:
            d.anomaly_score = float(rng.random())
        obs_a = env.observe(A)
        masked &= np.array_equal(obs_a, before_a)
        masked &= all(np.all(obs_a.reshape(n, -1)[d.id] == -1) for d in env.devices if not d.known_to_attacker)
        for d, s in zip(env.devices, scores):
            d.anomaly_score = s
        fails["masking"] += not masked
        # checkpoint / restore round trip over random bit flips
        for d in env.devices:
            d.config ^= rng.random(d.config.size) < 0.2
            d.compromise |= rng.random(d.compromise.size) < 0.2
        env.restore()
        fails["restore"] += not all(
            np.array_equal(d.config, c) and np.array_equal(d.compromise, k)
            for d, (c, k) in zip(env.devices, saved) if d.id not in owned)
        for d, (c, k) in zip(env.devices, saved):
            d.config, d.compromise = c.copy(), k.copy()
    elapsed = time.perf_counter() - t0
    ok = sum(fails.values()) == 0 and elapsed < 10
    record(1, ok, f"failures {fails} over 1000 cases each, {elapsed:.1f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. Shaping telescoping
# ---------------------------------------------------------------------------


def test_criterion_02_shaping_telescopes():
    t0 = time.perf_counter()
    env = CyberEnv(EnvConfig(steps=10))
    worst = 0.0
    for k in range(100):
        env.reset(k)
        rng = np.random.default_rng(k)
        phis, total, t = [env.phi()], 0.0, 0
        done = False
        while not done:
            r = env.step(random_action(env, D, rng), random_action(env, A, rng))
            total += env.cfg.gamma ** t * r.shaping
            phis.append(r.info.phi)
            t, done = t + 1, r.done
        beta, gamma = env.cfg.shaping_beta, env.cfg.gamma
        closed = beta * (gamma ** (len(phis) - 1) * phis[-1] - phis[0])
        worst = max(worst, abs(total - closed), abs(discounted_shaping(beta, gamma, np.array(phis)) - closed))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5
    record(2, ok, f"max |sum - closed form| = {worst:.2e} on 100 trajectories, {elapsed:.1f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. Nash solver
# ---------------------------------------------------------------------------


def _brute_gap(A_, B_, x, y):
    # independent oracle: every pure deviation enumerated explicitly
    gains = [e @ A_ @ y - x @ A_ @ y for e in np.eye(A_.shape[0])]
    gains += [x @ B_ @ e - x @ B_ @ y for e in np.eye(A_.shape[1])]
    return max(0.0, float(max(gains)))


def test_criterion_03_nash_solver():
    t0 = time.perf_counter()
    pennies = np.array([[1.0, -1.0], [-1.0, 1.0]])
    res = solve_nash(pennies, -pennies)
    pen_err = float(max(np.abs(res.row - 0.5).max(), np.abs(res.col - 0.5).max()))
    rng = np.random.default_rng(2024)
    gaps, methods = [], set()
    for _ in range(50):
        A_, B_ = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        r = solve_nash(A_, B_)
        methods.add(r.method)
        gaps.append(_brute_gap(A_, B_, r.row, r.col))
    elapsed = time.perf_counter() - t0
    ok = pen_err <= 1e-9 and max(gaps) <= 1e-8 and methods == {"support-enumeration"} and elapsed < 30
    record(3, ok, f"pennies error {pen_err:.1e}; worst 4x4 gap {max(gaps):.1e} over 50 games "
                  f"({sorted(methods)}), {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------------------
# 4. Beam search equals exhaustive enumeration on separable critics
# ---------------------------------------------------------------------------


def test_criterion_04_beam_equivalence():
    t0 = time.perf_counter()
    rows = np.array(list(itertools.product(range(3), (AttackerAction.ATTACK, AttackerAction.PROBE),
                                           range(2), range(2))))
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(100):
        w = rng.normal(size=(3, 2, 2, 2))

        def joint_q(actions, w=w):
            return np.array([sum(w[d, a.type, e, p] for d, e, p in a.assignments()) for a in actions])

        row_q = np.array([w[d, t, e, p] for d, t, e, p in rows])
        action, value = beam_search(A, rows, row_q, 0.0, joint_q, K=len(rows), tau=1e-6, rng=rng)
        _, best = exhaustive_best(A, rows, joint_q)
        hits += abs(joint_q([action])[0] - best) <= 1e-12 and abs(value - best) <= 1e-12
    elapsed = time.perf_counter() - t0
    ok = hits == 100 and elapsed < 30
    record(4, ok, f"{hits}/100 instances match the exhaustive optimum, {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------------------
# 5. Critic gradient check
# ---------------------------------------------------------------------------


def test_criterion_05_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, h = 0.0, 1e-6
    for k in range(20):
        ow, aw = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        hidden = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        net = make_critic(ow, aw, hidden, seed=100 + k)
        for b in net.biases:
            b += rng.normal(0, 0.1, b.shape)
        obs, act, y = rng.normal(size=(5, ow)), rng.normal(size=(5, aw)), rng.normal(size=5)
        _, grads = td_loss_and_grads(net, obs, act, y)
        num = []
        for p in net.params:
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up, _ = td_loss_and_grads(net, obs, act, y)
                p[idx] = old - h
                down, _ = td_loss_and_grads(net, obs, act, y)
                p[idx] = old
                g[idx] = (up - down) / (2 * h)
            num.append(g)
        a = np.concatenate([g.ravel() for g in grads])
        n = np.concatenate([g.ravel() for g in num])
        worst = max(worst, float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    record(5, ok, f"worst relative error {worst:.1e} on 20 networks, {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 7. Equilibrium on the Volt scenario
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def volt():
    cfg = EnvConfig()  # 10 devices, 30 steps, eta 0.4, 5 attacker-owned, gamma 0.99
    t0 = time.perf_counter()
    result = doar_loop(cfg, VOLT_DOAR, seed=0)
    return cfg, result, time.perf_counter() - t0


def test_criterion_06_equilibrium_gap(volt):
    cfg, result, solve_time = volt
    t0 = time.perf_counter()
    g = measured_gap(result, cfg, rollouts=EVAL_RUNS, seed=1, dcfg=VOLT_DOAR)
    elapsed = solve_time + time.perf_counter() - t0
    rel = g["relative"]
    ok = result.rounds <= 15 and all(rel[r] <= 0.05 for r in (A, D)) and elapsed <= 2 * 3600
    record(6, ok, f"{result.rounds} rounds; lower-bound gap / |value|: attacker {rel[A]:.1%} "
                  f"(gap {g['gap_lower_bound'][A]:.1f}, value {g['value'][A]:.1f}), defender {rel[D]:.1%} "
                  f"(gap {g['gap_lower_bound'][D]:.1f}, value {g['value'][D]:.1f}); want <= 5%; {elapsed:.0f}s")
    assert ok


def test_criterion_07_table_ordering(volt):
    cfg, result, _ = volt
    sol = doar_strategies(result)
    table = run_cross_table(cfg, resolve(["doar", "random", "pass"], A, sol),
                            resolve(["doar", "random", "preset", "pass"], D, sol), runs=10, seed=2)
    checks = {
        "def doar>=random": at_least(table.payoffs("doar", "doar", D), table.payoffs("doar", "random", D)),
        "def doar>=preset": at_least(table.payoffs("doar", "doar", D), table.payoffs("doar", "preset", D)),
        "att doar>=random": at_least(table.payoffs("doar", "doar", A), table.payoffs("random", "doar", A)),
        "att doar>=pass": at_least(table.payoffs("doar", "doar", A), table.payoffs("pass", "doar", A)),
    }
    means = (f"att doar/random/pass vs doar def: {table.mean('doar', 'doar', A):.1f}/"
             f"{table.mean('random', 'doar', A):.1f}/{table.mean('pass', 'doar', A):.1f}; "
             f"def doar/random/preset vs doar att: {table.mean('doar', 'doar', D):.1f}/"
             f"{table.mean('doar', 'random', D):.1f}/{table.mean('doar', 'preset', D):.1f}")
    ok = all(c[0] for c in checks.values())
    detail = ", ".join(f"{k} {'ok' if v[0] else 'no'} (p={v[1]:.2f})" for k, v in checks.items())
    record(7, ok, f"{detail}; {means}; 10 seeds")
    assert ok


# ---------------------------------------------------------------------------
# 8 and 9. Parameter sweeps
# ---------------------------------------------------------------------------


def _sweep(parameter, values, regime="fixed", known=False):
    spec = SweepSpec(parameter, values, regime, known, runs=EVAL_RUNS, seeds=(0,),
                     scenario=Scenario(EnvConfig(), SWEEP_DOAR))
    return run_sweep(spec)


def test_criterion_08_work_scale_trend():
    rows = _sweep("work_scale", (0.1, 1.0, 10.0))
    checks = sweep_checks("work_scale", "fixed", rows)
    ok = all(c.passed for c in checks)
    detail = "; ".join(f"{c.name} {[round(v, 3) for v in c.values]} rho {c.rho:+.2f} "
                       f"({'ok' if c.passed else 'no'})" for c in checks)
    record(8, ok, detail)
    assert ok


def test_criterion_09_zero_day_trends():
    grid = (1, 2, 5, 10)
    fixed = _sweep("zero_day_candidates", grid, "fixed")
    sub = _sweep("zero_day_candidates", grid, "submartingale")
    known = _sweep("zero_day_candidates", grid, "fixed", known=True)
    c_fixed = sweep_checks("zero_day_candidates", "fixed", fixed)[0]
    c_sub = sweep_checks("zero_day_candidates", "submartingale", sub)[0]
    _, d_unknown = grid_means(fixed, "defender")
    _, d_known = grid_means(known, "defender")
    known_ok = all(k >= u for k, u in zip(d_known, d_unknown))
    ok = c_fixed.passed and c_sub.passed and known_ok
    # diagnostic only: the same trends for a fixed (random) attacker against a passive defender
    seeds = derive_seeds(9, EVAL_RUNS, salt=1)
    rand, still = pure("random", baseline("random", A)), pure("pass", baseline("pass", D))
    fixed_pair = {regime: [float(pairing_metrics(point_config(EnvConfig(), "zero_day_candidates", n, regime),
                                                 rand, still, seeds)[:, 0].mean()) for n in grid]
                  for regime in ("fixed", "submartingale")}
    record(9, ok, f"fixed attacker {[round(v, 1) for v in c_fixed.values]} non-increasing "
                  f"({'ok' if c_fixed.passed else 'no'}); submartingale attacker "
                  f"{[round(v, 1) for v in c_sub.values]} non-decreasing ({'ok' if c_sub.passed else 'no'}); "
                  f"defender known {[round(v, 1) for v in d_known]} >= unknown {[round(v, 1) for v in d_unknown]} "
                  f"({'ok' if known_ok else 'no'}); diagnostic random-vs-pass attacker: fixed "
                  f"{[round(v, 1) for v in fixed_pair['fixed']]}, submartingale "
                  f"{[round(v, 1) for v in fixed_pair['submartingale']]}")
    assert ok


# ---------------------------------------------------------------------------
# 10. Detector quality
# ---------------------------------------------------------------------------


def test_criterion_10_detector_auc():
    t0 = time.perf_counter()
    cfg = EnvConfig()
    aucs = []
    for s in range(5):
        train = burn_in_samples(cfg, 500 + s, cfg.detector.burn_in, cfg.detector.burn_in_samples)
        clean = burn_in_samples(cfg, 600 + s, cfg.detector.burn_in, 300)
        forest = det.fit(train, n_trees=cfg.detector.n_trees, subsample=cfg.detector.subsample, seed=s)
        burst = det.inject_exploit_burst(clean, np.random.default_rng(700 + s))
        aucs.append(det.roc_auc(forest.score(burst), forest.score(clean)))
    elapsed = time.perf_counter() - t0
    ok = min(aucs) >= 0.9 and elapsed < 60
    record(10, ok, f"AUC per seed {[round(a, 3) for a in aucs]} (>= 0.9), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 11. Topology and churn
# ---------------------------------------------------------------------------


def test_criterion_11_topology_and_churn():
    slopes = [degree_slope(generate_initial(2000, seed=s).degrees()) for s in range(20)]
    g = generate_initial(10, seed=0, n_slots=20, min_size=8)
    rng = np.random.default_rng(11)
    events = sum(len(evolve(g, ChurnConfig(lam=0.7), rng)) for _ in range(100_000))
    rate = events / 100_000
    ok = all(-3.5 <= s <= -2.0 for s in slopes) and abs(rate - 0.7) <= 0.02
    record(11, ok, f"slopes in [{min(slopes):.2f}, {max(slopes):.2f}] over 20 graphs (want [-3.5, -2]); "
                   f"churn rate {rate:.4f} (want 0.7 +- 0.02)")
    assert ok


# ---------------------------------------------------------------------------
# 12. Determinism of the full pipeline
# ---------------------------------------------------------------------------

PIPELINE = {
    "env": {"steps": 6},
    "doar": {"max_rounds": 2, "rollouts": 3, "episodes": 3,
             "train": {"hidden": [16], "batch_size": 8, "warmup_steps": 5}},
    "cross_runs": 3,
}


def test_criterion_12_pipeline_determinism(tmp_path):
    scen = tmp_path / "scenario.json"
    scen.write_text(json.dumps(PIPELINE))
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"parameter": "work_scale", "values": [0.1, 10], "runs": 2, "scenario": PIPELINE}))
    for run in ("a", "b"):
        assert main(["run", "--scenario", str(scen), "--seed", "3", "--out", str(tmp_path / run / "run")]) == 0
        assert main(["sweep", "--spec", str(sweep), "--out", str(tmp_path / run / "sweep")]) == 0
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = [filecmp.cmp(tmp_path / "a" / p, tmp_path / "b" / p, shallow=False) for p in csvs]
    weights = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.weights"))
    same_w = [filecmp.cmp(tmp_path / "a" / p, tmp_path / "b" / p, shallow=False) for p in weights]
    ok = len(csvs) >= 6 and all(same) and all(same_w)
    record(12, ok, f"{sum(same)}/{len(csvs)} CSV files and {sum(same_w)}/{len(weights)} weight files "
                   "bit-identical across two runs")
    assert ok
