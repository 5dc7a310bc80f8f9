"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are written through
pytest's terminal reporter so they show despite output capture, and are
repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from reconplan.baselines import MpcController, PolicyController, mpc_decide
from reconplan.cmdp import Cmdp, Policy, SafetySpec, episode_rng, exact_return
from reconplan.composed import jam_recon
from reconplan.envs.jam import JamConfig, JamWorld
from reconplan.experiments import (
    ExperimentConfig,
    evaluate,
    heatmap,
    make_env,
    relative_threat,
    rollout,
    summarize,
    train,
    transfer_eval,
)
from reconplan.oracle import enumerate_return, enumerate_state_threat, enumerate_threat
from reconplan.planner import build_pmdp, rp_solve
from reconplan.secure import build_secure_set, certify_bound, random_member
from reconplan.threat import ThreatTable, compute_accident_threat, compute_threat, min_threat_policy, threat_for_mode

from instances import certificate_triple, budget_instance, random_instance, random_policy
from test_secure import tight_instance

MODES = ("discounted-danger", "accident-probability")


_terminal = None
LINES: list[str] = []


@pytest.fixture(autouse=True)
def _reporter(pytestconfig):
    global _terminal
    _terminal = pytestconfig.pluginmanager.get_plugin("terminalreporter")
    yield


def report(number: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    LINES.append(line)
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line)


def fmt(m) -> str:
    return f"{m.method} crash {m.crash_rate:.3f} [{m.crash_ci_low:.3f}, {m.crash_ci_high:.3f}] reward {m.avg_reward:.1f}"


# 1 ------------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    n = 200
    for seed in range(n):
        c = random_instance(seed, max_states=6, max_actions=3, max_horizon=5)
        pol = random_policy(c, episode_rng(seed, 1), deterministic=bool(seed % 2))
        worst = max(worst, abs(enumerate_return(c, pol).value - exact_return(c, pol)))
        tables = {"discounted-danger": compute_threat(c, pol), "accident-probability": compute_accident_threat(c, pol)}
        for mode, table in tables.items():
            for s in range(c.n_states):
                worst = max(worst, abs(enumerate_state_threat(c, pol, s, mode) - table.state_values[0, s]))
            # every (t, s, a) entry on a rotating state
            s = seed % c.n_states
            for t in range(c.horizon):
                for a in range(c.n_actions):
                    worst = max(worst, abs(enumerate_threat(c, pol, t, s, a, mode).value - table.values[t, s, a]))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 60
    report("1", ok, f"{n} CMDPs, max |DP - enumeration| = {worst:.2e} (tol 1e-10), {elapsed:.1f} s (limit 60 s)")
    assert ok


# 2 ------------------------------------------------------------------------------


def test_criterion_2_pool_safety_sweep():
    start = time.perf_counter()
    certified, checked, violations, worst_excess = 0, 0, 0, -np.inf
    seed = 0
    while certified < 1000:
        mode = MODES[seed % 2]
        c, spec = budget_instance(seed, mode)
        seed += 1
        res = rp_solve(c, spec)
        if not res.certified:
            continue
        certified += 1
        rng = episode_rng(seed, 3)
        members = [res.policy] + [random_member(res.secure, rng, deterministic=bool(k % 2)) for k in range(6)]
        for pol in members:
            level = threat_for_mode(c, pol, mode).state_values[0]
            for s0 in np.flatnonzero(c.initial > 0):
                excess = level[s0] - spec.budget
                worst_excess = max(worst_excess, excess)
                checked += 1
                violations += int(excess > 1e-10)
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 300
    report(
        "2",
        ok,
        f"{certified} certified of {seed} instances, {checked} pool members checked, {violations} violations, "
        f"max threat - c = {worst_excess:.3g}, {elapsed:.1f} s (limit 300 s)",
    )
    assert ok


# 3 ------------------------------------------------------------------------------


def test_criterion_3_certificates():
    start = time.perf_counter()
    held, total, min_gap = 0, 0, np.inf
    for seed in range(600):
        for mode in MODES:
            cert = certify_bound(*certificate_triple(seed, mode))
            total += 1
            held += int(cert.holds)
            min_gap = min(min_gap, cert.gap)
    c = tight_instance()
    eta = Policy.from_actions(np.zeros((c.horizon, 2), dtype=int), 2)
    table = compute_threat(c, eta)
    sec = build_secure_set(table, table.values[:, 0, 1].max())
    pi = Policy.from_actions(np.array([[1, 0]] + [[0, 0]] * (c.horizon - 1)), 2)
    tight = certify_bound(c, eta, pi, sec, table)
    rel_gap = tight.gap / tight.rhs
    elapsed = time.perf_counter() - start
    ok = held == total and total >= 1000 and tight.holds and rel_gap < 0.1 and elapsed < 300
    report(
        "3",
        ok,
        f"{held}/{total} certificates hold (min gap {min_gap:.2e}); tight instance lhs {tight.lhs:.4f} "
        f"rhs {tight.rhs:.4f} gap {100 * rel_gap:.2f}% of rhs (limit 10%), {elapsed:.1f} s",
    )
    assert ok


# 4 ------------------------------------------------------------------------------


def test_criterion_4_composition_bound():
    start = time.perf_counter()
    w = JamWorld(JamConfig(width=5, height=5, n_obstacles=2))
    recon = jam_recon(w)
    reach_ag = w.reachable_agent(recon.eta)
    reach_o = w.reachable_obstacle()
    points, violations, worst = 0, 0, -np.inf
    for t, joint in w.joint_threat(recon.eta, 2):
        ag = np.flatnonzero(reach_ag[t])
        ob = np.flatnonzero(reach_o[t])
        exact = joint[np.ix_(ag, ob, ob)]  # (ag, o1, o2, A)
        mv = recon.moving[t][np.ix_(ag, ob)]  # (ag, o, A)
        bound = recon.static[t][ag][:, None, None, :] + mv[:, :, None, :] + mv[:, None, :, :]
        diff = exact - bound
        points += diff.size
        violations += int((diff > 1e-12).sum())
        worst = max(worst, float(diff.max()))
    elapsed = time.perf_counter() - start
    ok = points >= 10_000 and violations == 0 and elapsed < 600
    report(
        "4",
        ok,
        f"5x5 Jam, 2 obstacles: {points} reachable (t, state, action) points, {violations} violations, "
        f"max(joint - sum) = {worst:.3g}, {elapsed:.1f} s (limit 600 s)",
    )
    assert ok


# 5 ------------------------------------------------------------------------------


def test_criterion_5_pmdp_equivalence():
    rng = episode_rng(55)
    worst, n, seed = 0.0, 0, 0
    while n < 100:
        c = random_instance(seed)
        seed += 1
        eta, table = min_threat_policy(c)
        sec = build_secure_set(table, np.quantile(table.values, rng.uniform(0.3, 0.9)))
        if not sec.secure_states[c.initial > 0].all():
            continue
        pmdp = build_pmdp(c, sec, table)
        pol = random_member(sec, rng, deterministic=bool(n % 2))
        worst = max(worst, abs(pmdp.evaluate(pol) - exact_return(c, pol)))
        n += 1
    ok = worst <= 1e-10
    report("5", ok, f"{n} pool policies, max |planning-MDP return - exact_return| = {worst:.2e} (tol 1e-10)")
    assert ok


# 6 ------------------------------------------------------------------------------

SEEDS = tuple(range(10))


def _run_metrics(config: ExperimentConfig, n_obstacles=None):
    bundle = make_env(config.env, n_obstacles=n_obstacles)
    art = train(config, bundle)
    return {r.method: summarize(r.method, n_obstacles, r.episodes) for r in evaluate(config, bundle, art, n_obstacles)}, art


def test_criterion_6a_zero_crashes_vs_penalized_q():
    circuit = ExperimentConfig(
        env={"kind": "circuit"}, budget=0.05, methods=("rp", "penalized-q:0"), episodes=40, seeds=SEEDS, train_episodes=10_000
    )
    jam = ExperimentConfig(
        env={"kind": "jam", "n_obstacles": 2}, budget=0.1, methods=("rp", "penalized-q:0"), episodes=40, seeds=SEEDS, train_episodes=3000
    )
    mc, _ = _run_metrics(circuit)
    mj, _ = _run_metrics(jam)
    ok = (
        mc["rp"].crash_rate == 0
        and mc["penalized-q:0"].crash_rate > 0
        and mj["rp"].crash_rate == 0
        and mj["penalized-q:0"].crash_rate > 0
    )
    report(
        "6a",
        ok,
        f"circuit: {fmt(mc['rp'])}; {fmt(mc['penalized-q:0'])} | jam N=2: {fmt(mj['rp'])}; {fmt(mj['penalized-q:0'])}",
    )
    assert ok


def test_criterion_6b_transfer_narrowed_circuit():
    budget = 0.05
    config = ExperimentConfig(
        env={"kind": "circuit", "layout": "ring_long"},
        budget=budget,
        methods=("rp", "penalized-q:0", "penalized-q:200"),
        episodes=40,
        seeds=SEEDS,
        train_episodes=10_000,
    )
    bundle = make_env(config.env)
    art = train(config, bundle)
    metrics = {m.method: m for m in transfer_eval(config, art, {"kind": "circuit", "layout": "ring_long_narrowed"})}
    rp = metrics["rp"]
    frozen = [metrics["penalized-q:0"], metrics["penalized-q:200"]]
    ok = rp.crash_rate <= budget and all(m.crash_rate > budget for m in frozen)
    report("6b", ok, f"budget {budget}: {fmt(rp)}; " + "; ".join(fmt(m) for m in frozen))
    assert ok


def _full_branching(n_states=6, n_actions=5, horizon=8, seed=0) -> Cmdp:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    danger = (rng.random((n_states, n_actions)) < 0.2).astype(float)
    return Cmdp(P, rng.random((n_states, n_actions)), danger, np.eye(n_states)[0], horizon)


def test_criterion_6c_decision_cost():
    from reconplan.envs.base import CmdpEnv

    k, budget = 3, 0.5
    c = _full_branching()
    env = CmdpEnv(c)
    rp = rp_solve(c, SafetySpec(budget))
    mpc_times, rp_times, mpc_evals, decisions = [], [], 0, 0
    for seed in SEEDS:
        mpc = MpcController(c, k, budget)
        rollout(env, mpc, seed, 0, mpc_times)
        mpc_evals += mpc.evaluations
        rollout(env, PolicyController(rp.policy), seed, 0, rp_times)
        decisions += c.horizon
    full = mpc_decide(c, 0, 0, k, budget).evaluations
    A, S = c.n_actions, c.n_states
    ratio = np.median(mpc_times) / np.median(rp_times)
    ok = ratio >= 10 and full == A * sum((A * S) ** j for j in range(k))
    report(
        "6c",
        ok,
        f"k={k}, |A|={A}, |S|={S}: MPC {mpc_evals / decisions:.0f} node evaluations/decision (full depth {full}) "
        f"vs RP 1 lookup; median decision time MPC {1e3 * np.median(mpc_times):.2f} ms vs RP "
        f"{1e6 * np.median(rp_times):.2f} us, ratio {ratio:.0f}x (need >= 10x), over {len(SEEDS)} seeds",
    )
    assert ok


def test_criterion_6d_deep_trap():
    config = ExperimentConfig(
        env={"kind": "trap", "trap_depth": 3, "horizon": 6},
        budget=0.1,
        mode="accident-probability",
        methods=("rp", "mpc:2"),
        episodes=20,
        seeds=SEEDS,
    )
    m, art = _run_metrics(config)
    ok = art.rp.certified and m["rp"].crash_rate == 0 and m["mpc:2"].crash_rate > 0
    report("6d", ok, f"deep trap (crash 4 steps in): {fmt(m['rp'])}; {fmt(m['mpc:2'])}")
    assert ok


# 7 ------------------------------------------------------------------------------


def test_criterion_7_secure_set_monotonicity():
    failures, pairs, strict = 0, 500, 0
    for seed in range(pairs):
        rng = np.random.default_rng(seed)
        T, S, A = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 4)
        low = rng.random((T, S, A))
        high = low + rng.random((T, S, A)) * (rng.random((T, S, A)) < 0.5)
        x = rng.uniform(0, 1.2, size=T)
        big = build_secure_set(ThreatTable(low, "discounted-danger"), x)
        small = build_secure_set(ThreatTable(high, "discounted-danger"), x)
        bad = np.any(small.secure_actions & ~big.secure_actions) or np.any(small.secure_states & ~big.secure_states)
        failures += int(bad)
        strict += int(small.secure_actions.sum() < big.secure_actions.sum())
    ok = failures == 0
    report("7", ok, f"{pairs} dominated table pairs, {failures} inclusion failures ({strict} with a strictly smaller set)")
    assert ok


# 8 ------------------------------------------------------------------------------


def test_criterion_8_heatmaps():
    model, table = relative_threat(horizon=6, stay_prob=0.5)
    extent = 5
    maps = {v: heatmap(model, table, v, extent) for v in [(0, 0), (0, 1), (1, 0), (1, 1)]}
    still = maps[(0, 0)]
    lr = np.max(np.abs(still - still[:, ::-1]))
    ud = np.max(np.abs(still - still[::-1, :]))
    tr = np.max(np.abs(still - still.T))
    # horizontal motion keeps the up-down mirror; swapping axes maps (0,1) onto (1,0)
    east_ud = np.max(np.abs(maps[(0, 1)] - maps[(0, 1)][::-1, :]))
    swap = np.max(np.abs(maps[(0, 1)].T - maps[(1, 0)]))
    diag = np.max(np.abs(maps[(1, 1)] - maps[(1, 1)].T))
    symmetry = max(lr, ud, tr, east_ud, swap, diag)
    differs = np.max(np.abs(still - maps[(0, 1)]))
    ok = symmetry <= 1e-10 and differs > 1e-3 and not np.array_equal(maps[(0, 1)], maps[(1, 1)])
    report(
        "8",
        ok,
        f"max symmetry residual {symmetry:.2e} (tol 1e-10); speed (0,0) vs (0,1) max difference {differs:.3f}",
    )
    assert ok
