import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reconplan.cmdp import SafetySpec, backward_optimal, episode_rng, exact_return, validate
from reconplan.composed import jam_recon
from reconplan.envs import grid_jam
from reconplan.envs.base import CmdpEnv
from reconplan.envs.circuit import RING_12, RING_LONG, CircuitConfig, action_index, grid_circuit
from reconplan.envs.gather import GatherConfig, grid_gather
from reconplan.envs.jam import N_ACTIONS, JamConfig, JamWorld
from reconplan.envs.layout import LayoutError, config_from_dict, config_to_json, parse_layout, render_layout
from reconplan.envs.random import random_cmdp
from reconplan.envs.traps import deep_trap
from reconplan.planner import rp_solve
from reconplan.threat import threat_for_mode

ACC = "accident-probability"


def start_threat(cmdp, policy, mode=ACC) -> float:
    table = threat_for_mode(cmdp, policy, mode)
    return float(cmdp.initial @ table.state_values[0])


# -- random ----------------------------------------------------------------------


def test_random_zero_hazard_density():
    assert np.all(random_cmdp(5, 3, 4, hazard_density=0.0, seed=1).danger == 0)


def test_random_same_seed_identical():
    a = random_cmdp(4, 2, 3, seed=9, sparsity=0.5)
    b = random_cmdp(4, 2, 3, seed=9, sparsity=0.5)
    assert np.array_equal(a.dense_transition(), b.dense_transition())
    assert np.array_equal(a.reward, b.reward) and np.array_equal(a.danger, b.danger)
    c = random_cmdp(4, 2, 3, seed=10, sparsity=0.5)
    assert not np.array_equal(a.reward, c.reward)


@settings(max_examples=100, deadline=None)
@given(
    S=st.integers(1, 8),
    A=st.integers(1, 4),
    T=st.integers(1, 6),
    density=st.floats(0, 1),
    sparsity=st.sampled_from([0.0, 0.3, 0.9]),
    seed=st.integers(0, 10**6),
    random_initial=st.booleans(),
)
def test_random_instances_validate(S, A, T, density, sparsity, seed, random_initial):
    c = random_cmdp(S, A, T, density, seed, sparsity=sparsity, random_initial=random_initial)
    assert validate(c).ok
    assert set(np.unique(c.danger)) <= {0.0, 1.0}
    assert np.all((c.reward >= 0) & (c.reward < 1))


def test_random_rejects_bad_sizes():
    with pytest.raises(ValueError):
        random_cmdp(0, 2, 3)
    with pytest.raises(ValueError):
        random_cmdp(2, 2, 3, hazard_density=1.5)


# -- gather ------------------------------------------------------------------------


def test_gather_defaults():
    cfg = GatherConfig()
    assert (cfg.n_apples, cfg.n_bombs, cfg.apple_reward) == (2, 10, 10.0)
    w = grid_gather()
    assert len(w.apples) == 2 and len(w.bombs) == 10
    assert w.cmdp.n_states == 36 * 4 and w.cmdp.n_actions == 5
    assert validate(w.cmdp).ok


def test_gather_state_roundtrip():
    w = grid_gather(GatherConfig(width=4, height=3, n_bombs=2))
    for s in range(w.cmdp.n_states):
        assert w.state_index(*w.decode(s)) == s


def test_gather_no_bombs_collects_apples_safely():
    w = grid_gather(GatherConfig(width=4, height=4, n_bombs=0, slip=0.0, horizon=8))
    pol, _ = backward_optimal(w.cmdp)
    assert np.all(w.cmdp.danger == 0)
    assert start_threat(w.cmdp, pol) == 0.0
    # both apples within 8 moves on a 4x4 field, no slip, gamma < 1 rewards earliest pickup
    assert exact_return(w.cmdp, pol) > 10.0


def test_gather_too_small_field():
    with pytest.raises(LayoutError):
        grid_gather(GatherConfig(width=2, height=2, n_apples=2, n_bombs=2))


TINY = "SBA/.../..."


@pytest.mark.parametrize("slip", [0.0, 0.1])
def test_gather_tiny_rp_avoids_bomb(slip):
    w = grid_gather(GatherConfig(layout=TINY, slip=slip, horizon=6))
    c = w.cmdp
    unconstrained, _ = backward_optimal(c)
    p_hit = start_threat(c, unconstrained)
    assert p_hit > 0.5  # the short route crosses the bomb
    for budget in (0.0, 0.05, 0.2, 0.5):
        res = rp_solve(c, SafetySpec(budget, ACC))
        assert start_threat(c, res.policy) < p_hit
        if res.certified:
            assert start_threat(c, res.policy) <= budget + 1e-12
        if slip == 0.0:
            assert res.certified
            assert start_threat(c, res.policy) == 0.0
            assert exact_return(c, res.policy) > 9.0  # the apple is still collected by the detour


def test_gather_layout_needs_one_start():
    with pytest.raises(LayoutError):
        grid_gather(GatherConfig(layout="..A/.B./..."))


# -- circuit -------------------------------------------------------------------------


def test_circuit_defaults():
    cfg = CircuitConfig()
    assert cfg.crash_penalty == 200.0 and cfg.stop_penalty == 1.0
    w = grid_circuit()
    assert w.cmdp.n_actions == 9
    assert w.cmdp.n_states == len(w.track) * 4 * 3
    assert validate(w.cmdp).ok
    assert w.features.max() < w.n_features == 48


def test_circuit_state_roundtrip():
    w = grid_circuit(CircuitConfig(layout=RING_12))
    for s in range(w.cmdp.n_states):
        assert w.state_index(*w.decode(s)) == s


def test_circuit_rewards_per_state():
    w = grid_circuit(CircuitConfig(layout=RING_12))
    c = w.cmdp
    start = w.start_state
    assert np.all(c.reward[start] == -1.0)  # standing still at speed 0
    crashing = np.flatnonzero(c.danger[:, 0] == 1)
    assert crashing.size > 0
    assert np.all(c.reward[crashing] <= -200.0 + 1250.0 / 4)


def test_circuit_speed_cap_zero_never_crashes():
    w = grid_circuit(CircuitConfig(max_speed=0))
    c = w.cmdp
    for pol in (backward_optimal(c)[0], rp_solve(c, SafetySpec(0.1, ACC)).policy):
        assert start_threat(c, pol) == 0.0
        assert exact_return(c, pol) == -c.horizon  # only the stop penalty


def test_circuit_ring12_low_surge_lap_certified():
    w = grid_circuit(CircuitConfig(layout=RING_12, surge=0.05, horizon=10))
    c = w.cmdp
    budget = 0.05
    res = rp_solve(c, SafetySpec(budget, ACC))
    assert res.certified
    assert start_threat(c, res.policy) <= budget
    # expected progress beyond one full lap
    assert exact_return(c, res.policy) > w.config.lap_reward


def test_circuit_disconnected_track():
    with pytest.raises(LayoutError):
        grid_circuit(CircuitConfig(layout="#####/#S#.#/#####"))


def test_circuit_action_index():
    assert sorted(action_index(s, a) for s in (-1, 0, 1) for a in (-1, 0, 1)) == list(range(9))


def test_circuit_crash_is_deterministic_in_state():
    c = grid_circuit(CircuitConfig(layout=RING_LONG)).cmdp
    assert np.all(c.danger == c.danger[:, :1])
    assert set(np.unique(c.danger)) <= {0.0, 1.0}


# -- jam -------------------------------------------------------------------------------


def test_jam_no_obstacles_is_shortest_path():
    w = JamWorld(JamConfig(n_obstacles=0))
    recon = jam_recon(w)
    env = w.env()
    state = env.reset(episode_rng(0))
    assert state.obstacles == ()
    assert np.all(recon.composed(state) == 0)
    pol, _ = backward_optimal(w.agent_cmdp)
    # Chebyshev distance 4 from the bottom-centre of a 5x5 field to the exit
    ag, steps = w.agent_index(w.start), 0
    while ag != w.exited and steps < w.config.horizon:
        ag = w.agent_next[ag, pol.actions()[steps, ag]]
        steps += 1
    assert ag == w.exited
    assert steps <= 5  # 4 cells, one step lost accelerating from rest at most


def test_jam_single_obstacle_composed_equals_joint():
    w = JamWorld(JamConfig(n_obstacles=1))
    recon = jam_recon(w)
    assert np.all(recon.static == 0)
    for t, q in w.joint_threat(recon.eta, 1):
        assert np.allclose(q, recon.moving[t], atol=1e-12)


def test_jam_subsystem_marginals_match_kernels():
    w = JamWorld(JamConfig(n_obstacles=1, width=4, height=4, horizon=4))
    csr = w.subsystem_cmdp.csr
    n_ag, n_o = w.n_agent, w.n_obs_states
    rng = np.random.default_rng(0)
    for _ in range(200):
        ag, o, a = rng.integers(n_ag), rng.integers(n_o), rng.integers(N_ACTIONS)
        row = csr[(ag * n_o + o) * N_ACTIONS + a].toarray().reshape(n_ag, n_o)
        obs_marginal = row.sum(axis=0)
        agent_marginal = row.sum(axis=1)
        assert np.allclose(obs_marginal, w.obstacle_kernel[o], atol=1e-15)
        assert agent_marginal[w.agent_next[ag, a]] == pytest.approx(1.0, abs=1e-15)


def test_jam_joint_kernel_factorizes():
    w = JamWorld(JamConfig(n_obstacles=2, width=3, height=3, horizon=3, zone_radius=0, min_start_distance=1))
    joint = w.tiny_joint_cmdp()
    assert validate(joint).ok
    n_ag, n_o = w.n_agent, w.n_obs_states
    rng = np.random.default_rng(1)
    for _ in range(200):
        ag, o1, o2, a = rng.integers(n_ag), rng.integers(n_o), rng.integers(n_o), rng.integers(N_ACTIONS)
        s = (ag * n_o + o1) * n_o + o2
        row = joint.csr[s * N_ACTIONS + a].toarray().reshape(n_ag, n_o, n_o)
        first = row.sum(axis=(0, 2))
        second = row.sum(axis=(0, 1))
        assert np.allclose(first, w.obstacle_kernel[o1], atol=1e-15)
        assert np.allclose(second, w.obstacle_kernel[o2], atol=1e-15)
        assert np.allclose(row.sum(axis=0), np.outer(first, second), atol=1e-15)
        assert row.sum(axis=(1, 2))[w.agent_next[ag, a]] == pytest.approx(1.0, abs=1e-15)


def test_jam_models_validate():
    w = JamWorld()
    assert validate(w.agent_cmdp).ok
    assert validate(w.subsystem_cmdp).ok


def test_jam_safety_zones_absorb_obstacles():
    w = JamWorld()
    M = w.obstacle_kernel
    assert M[w.gone, w.gone] == 1.0
    # a cell next to a zone sends some mass to the absorbing state
    r, c = 0, w.W - 3
    assert w.zone[0, w.W - 2] and M[w.obstacle_index((r, c)), w.gone] > 0
    assert np.allclose(M.sum(axis=1), 1.0)
    assert np.all(w.obstacle_initial[np.flatnonzero(w.zone.ravel())] == 0)


def test_jam_simulation_deterministic():
    env = JamWorld().env(3)
    ctrl_actions = np.random.default_rng(0).integers(N_ACTIONS, size=env.horizon)

    def episode(seed):
        rng = episode_rng(seed, 0)
        state = env.reset(rng)
        out = [state]
        for t, a in enumerate(ctrl_actions):
            state, r, d, _ = env.step(state, int(a), t, rng)
            out.append((state, r, d))
        return out

    assert episode(4) == episode(4)
    assert episode(4) != episode(5)


def test_jam_capacity_and_field_errors():
    with pytest.raises(LayoutError):
        JamWorld(JamConfig(n_obstacles=50))
    with pytest.raises(LayoutError):
        JamWorld(JamConfig(width=2, height=5))
    with pytest.raises(LayoutError):
        JamWorld(JamConfig(start=(0, 0)))


def test_grid_jam_factory():
    assert isinstance(grid_jam(), JamWorld)


def test_jam_static_obstacle_danger():
    w = JamWorld(JamConfig(static_obstacles=((3, 2),), n_obstacles=0))
    ag = w.agent_index(w.start)
    up = [a for a in range(N_ACTIONS) if w.agent_new_cell[ag, a] == 3 * w.W + 2]
    assert up and np.all(w.static_danger[ag, up] == 1.0)


# -- layouts and configs ----------------------------------------------------------------


def test_layout_parse_and_render():
    grid = parse_layout("#.#/S.A")
    assert grid.shape == (2, 3)
    assert render_layout(grid) == "#.#\nS.A"
    assert np.array_equal(parse_layout("#.#\nS.A\n"), grid)


@pytest.mark.parametrize("text", ["", "  \n ", "##/#"])
def test_layout_errors(text):
    with pytest.raises(LayoutError):
        parse_layout(text)


def test_config_json_roundtrip():
    import json

    cfg = JamConfig(static_obstacles=((1, 1), (2, 3)), n_obstacles=1)
    back = config_from_dict(JamConfig, json.loads(config_to_json(cfg)))
    assert back == cfg
    with pytest.raises(ValueError):
        config_from_dict(JamConfig, {"wings": 2})


def test_cmdp_env_matches_model():
    c = deep_trap(slip=0.3)
    env = CmdpEnv(c)
    rng = episode_rng(0)
    counts = np.zeros(c.n_states)
    for _ in range(4000):
        nxt, r, d, _ = env.step(0, 0, 0, rng)
        counts[nxt] += 1
        assert r == c.reward[0, 0] and d == c.danger[0, 0]
    assert counts[0] / 4000 == pytest.approx(0.3, abs=3 * np.sqrt(0.21 / 4000))
    with pytest.raises(ValueError):
        CmdpEnv(c, features=np.zeros(c.n_states, dtype=int), n_features=0)
