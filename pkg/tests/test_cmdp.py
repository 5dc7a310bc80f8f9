import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from reconplan.cmdp import (
    Cmdp,
    DimensionError,
    InvalidCmdpError,
    Policy,
    SafetySpec,
    backward_optimal,
    episode_rng,
    exact_return,
    occupancy,
    require_valid,
    simulate,
    simulate_many,
    trajectory_probability,
    validate,
)
from reconplan.oracle import enumerate_paths, enumerate_return

from instances import point, random_instance, random_policy, single_state


def two_by_two(**changes) -> Cmdp:
    P = np.array([[[0.7, 0.3], [0.2, 0.8]], [[1.0, 0.0], [0.5, 0.5]]])
    base = dict(
        transition=P,
        reward=[[1.0, 0.0], [0.5, 2.0]],
        danger=[[0.0, 1.0], [0.0, 0.0]],
        initial=[1.0, 0.0],
        horizon=3,
        gamma=0.9,
        beta=0.8,
    )
    base.update(changes)
    return Cmdp(**base)


def three_state() -> Cmdp:
    P = np.array(
        [
            [[0.6, 0.4, 0.0], [0.1, 0.1, 0.8]],
            [[0.3, 0.3, 0.4], [0.0, 1.0, 0.0]],
            [[0.5, 0.0, 0.5], [0.2, 0.2, 0.6]],
        ]
    )
    reward = [[1.0, 0.2], [0.0, 3.0], [-1.0, 0.5]]
    danger = [[0.0, 0.5], [1.0, 0.0], [0.0, 0.0]]
    return Cmdp(P, reward, danger, [0.5, 0.5, 0.0], 4, gamma=0.9, beta=0.8)


# -- validate ----------------------------------------------------------------


def test_validate_accepts_well_formed():
    report = validate(two_by_two())
    assert report.ok and bool(report)
    require_valid(two_by_two())


def test_validate_names_short_row():
    P = two_by_two().transition.copy()
    P[1, 0] = [0.6, 0.3]
    report = validate(two_by_two(transition=P))
    assert not report.ok
    assert len(report.errors) == 1
    assert "(s=1, a=0)" in report.errors[0]


def test_validate_names_negative_danger():
    report = validate(two_by_two(danger=[[0.0, 0.0], [-0.1, 0.0]]))
    assert not report.ok
    assert any("(s=1, a=0)" in e for e in report.errors)
    with pytest.raises(InvalidCmdpError):
        require_valid(two_by_two(danger=[[0.0, 0.0], [-0.1, 0.0]]))


def test_validate_reports_every_violation():
    P = two_by_two().transition.copy()
    P[0, 1] = [0.1, 0.1]
    bad = two_by_two(transition=P, danger=[[-1.0, 0.0], [0.0, 0.0]], initial=[0.5, 0.4], beta=1.0)
    errors = validate(bad).errors
    assert len(errors) == 4


def test_beta_one_rejected_by_validation():
    assert not validate(two_by_two(beta=1.0)).ok
    assert validate(two_by_two(gamma=1.0)).ok


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        Cmdp(np.ones((2, 2, 3)) / 3, np.zeros((2, 2)), np.zeros((2, 2)), point(2), 2)


def test_cmdp_is_immutable():
    c = two_by_two()
    with pytest.raises(ValueError):
        c.reward[0, 0] = 5.0


def test_json_roundtrip(tmp_path):
    c = three_state()
    path = tmp_path / "c.json"
    c.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"n_states", "n_actions", "horizon", "gamma", "beta", "transition", "reward", "danger", "initial"}
    back = Cmdp.load(path)
    assert np.array_equal(back.dense_transition(), c.dense_transition())
    assert back.horizon == c.horizon and back.gamma == c.gamma and back.beta == c.beta


def test_safety_spec_invariants():
    SafetySpec(0.0)
    SafetySpec(1.0, "accident-probability")
    with pytest.raises(ValueError):
        SafetySpec(-0.1)
    with pytest.raises(ValueError):
        SafetySpec(1.5, "accident-probability")
    with pytest.raises(ValueError):
        SafetySpec(0.1, "bogus")


def test_policy_validation():
    assert Policy.uniform(2, 3, 4).validate().ok
    bad = np.full((1, 1, 2), 0.6)
    assert not Policy(bad).validate().ok
    with pytest.raises(ValueError):
        Policy(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), stationary=True)


# -- simulate ----------------------------------------------------------------


def test_simulate_deterministic_chain():
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    c = Cmdp(P, [[1.0], [2.0], [3.0]], [[0.0], [0.5], [0.0]], point(3), 3)
    pol = Policy.uniform(3, 3, 1)
    for seed in (0, 7, 123):
        tr = simulate(c, pol, seed)
        assert tr.states.tolist() == [0, 1, 2, 2]
        assert tr.actions.tolist() == [0, 0, 0]
        assert tr.rewards.tolist() == [1.0, 2.0, 3.0]
        assert tr.dangers.tolist() == [0.0, 0.5, 0.0]


def test_simulate_same_seed_identical():
    c = three_state()
    pol = Policy.uniform(4, 3, 2)
    a, b = simulate(c, pol, 42), simulate(c, pol, 42)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)


def test_trajectory_indexing_convention():
    c = three_state()
    pol = Policy.uniform(4, 3, 2)
    for seed in range(20):
        tr = simulate(c, pol, seed)
        assert len(tr.states) == c.horizon + 1 and len(tr.actions) == c.horizon
        assert np.array_equal(tr.rewards, c.reward[tr.states[:-1], tr.actions])
        assert np.array_equal(tr.dangers, c.danger[tr.states[:-1], tr.actions])


def test_trajectory_csv(tmp_path):
    tr = simulate(three_state(), Policy.uniform(4, 3, 2), 3)
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,s,a,r,d"
    assert len(lines) == 1 + 4 + 1


def test_policy_dimension_mismatch():
    with pytest.raises(DimensionError):
        simulate(three_state(), Policy.uniform(3, 3, 2), 0)
    with pytest.raises(DimensionError):
        exact_return(three_state(), Policy.uniform(4, 2, 2))


def test_empirical_return_matches_exact():
    c = three_state()
    pol = Policy(episode_rng(5).dirichlet(np.ones(2), size=(4, 3)))
    batch = simulate_many(c, pol, 100_000, seed=11)
    returns = batch.returns(c.gamma)
    se = returns.std(ddof=1) / np.sqrt(returns.size)
    assert abs(returns.mean() - exact_return(c, pol)) < 3 * se


def test_sampler_is_measure_preserving():
    c = random_instance(3, max_states=4, max_actions=3, max_horizon=3)
    c = c.replace(initial=np.full(c.n_states, 1.0 / c.n_states))
    pol = random_policy(c, episode_rng(9))
    n = 100_000
    batch = simulate_many(c, pol, n, seed=21)
    paths = enumerate_paths(c, pol)
    for i in range(paths.probs.size):
        p = trajectory_probability(c, pol, paths.states[i], paths.actions[i])
        assert p == pytest.approx(paths.probs[i], rel=1e-12)
    # every sampled trajectory is one of the enumerated ones, and the full
    # histogram fits the exact probabilities
    codes = {tuple(s) + tuple(a): i for i, (s, a) in enumerate(zip(paths.states, paths.actions))}
    counts = np.zeros(paths.probs.size)
    for s, a in zip(batch.states, batch.actions):
        counts[codes[tuple(s) + tuple(a)]] += 1
    assert chisquare(counts, paths.probs * n).pvalue > 1e-3
    # coarse events, each within 3 binomial standard errors
    events = [batch.states[:, -1] == s for s in range(c.n_states)]
    exact = [paths.probs[paths.states[:, -1] == s].sum() for s in range(c.n_states)]
    events += [batch.actions[:, 0] == a for a in range(c.n_actions)]
    exact += [paths.probs[paths.actions[:, 0] == a].sum() for a in range(c.n_actions)]
    for hits, p in zip(events, exact):
        se = np.sqrt(p * (1 - p) / n)
        assert abs(hits.mean() - p) <= 3 * se + 1e-15


def test_simulate_many_deterministic_given_seed():
    c = three_state()
    pol = Policy.uniform(4, 3, 2)
    a = simulate_many(c, pol, 500, seed=4)
    b = simulate_many(c, pol, 500, seed=4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)


# -- exact_return ------------------------------------------------------------


def test_exact_return_zero_reward():
    c = three_state().replace(reward=np.zeros((3, 2)))
    assert exact_return(c, Policy.uniform(4, 3, 2)) == 0.0


def test_exact_return_hand_value():
    c = single_state(2, reward=1.0, gamma=0.5)
    # sum_{k=1}^{2} 0.5^k
    assert exact_return(c, Policy.uniform(2, 1, 1)) == pytest.approx(0.5 + 0.25, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_exact_return_matches_enumeration(seed):
    c = random_instance(seed, max_states=4, max_actions=3, max_horizon=4)
    c = c.replace(horizon=4)
    pol = random_policy(c, episode_rng(seed))
    res = enumerate_return(c, pol)
    assert abs(exact_return(c, pol) - res.value) < 1e-10
    assert abs(res.mass_check - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-5, 5, allow_nan=False))
def test_exact_return_linear_in_reward(seed, alpha):
    c = random_instance(seed)
    pol = random_policy(c, episode_rng(seed))
    base = exact_return(c, pol)
    scaled = exact_return(c.replace(reward=alpha * c.reward), pol)
    assert abs(scaled - alpha * base) <= 1e-12 * max(1.0, abs(alpha * base))


def test_occupancy_rows_are_distributions():
    c = three_state()
    mu = occupancy(c, Policy.uniform(4, 3, 2))
    assert np.allclose(mu.sum(axis=1), 1.0, atol=1e-12)


def test_backward_optimal_beats_random_policies():
    c = random_instance(17)
    opt, V = backward_optimal(c)
    best = exact_return(c, opt)
    assert best == pytest.approx(float(c.initial @ V[0]), abs=1e-12)
    rng = episode_rng(1)
    for _ in range(50):
        assert exact_return(c, random_policy(c, rng)) <= best + 1e-12


def test_sparse_and_dense_agree():
    import scipy.sparse as sp

    c = three_state()
    sparse = c.replace(transition=sp.csr_matrix(c.kernel))
    pol = Policy.uniform(4, 3, 2)
    assert exact_return(sparse, pol) == pytest.approx(exact_return(c, pol), abs=1e-14)
    assert validate(sparse).ok
