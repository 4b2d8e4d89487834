import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refer_marl.envs import CoopTargets, PursuitLite, StepAfterTerminal, TraceRecorder, make_env, read_trace
from refer_marl.envs.pursuit import STAY


def rollout(env, seed, actions_fn, steps=100):
    env.reset(seed)
    out = []
    for t in range(steps):
        r, s, done = env.step(actions_fn(t))
        out.append((r.copy(), s.copy(), done))
        if done:
            break
    return out


# -- PursuitLite -------------------------------------------------------------------

def test_pursuit_descriptors():
    env = PursuitLite()
    d = env.describe()
    assert d["n_agents"] == 4 and d["n_actions"] == 5 and d["obs_dim"] == 75 and d["max_steps"] == 100
    assert env.reset(0).shape == (4, 75)


def test_pursuit_all_stay_keeps_pursuers():
    env = PursuitLite()
    env.reset(3)
    before = env.pursuers.copy()
    for _ in range(10):
        env.step([STAY] * 4)
    assert np.array_equal(env.pursuers, before)


def test_pursuit_surround_pays_everyone():
    env = PursuitLite()
    env.set_layout(pursuers=[(2, 3), (4, 3), (3, 2), (3, 4)], evaders=[(3, 3), (7, 7), (7, 0), (0, 7)])
    r, _, done = env.step([STAY] * 4)
    assert np.all(r >= 5.0)
    # every pursuer also touched the captured evader
    assert np.allclose(r, 5.01, rtol=0, atol=1e-12)
    assert not env.alive[0] and env.caught_total == 1 and not done


def test_pursuit_wall_counts_as_surrounding_side():
    env = PursuitLite(n_evaders=1)
    env.set_layout(pursuers=[(1, 0), (0, 1), (5, 5), (6, 6)], evaders=[(0, 0)])
    r, _, done = env.step([STAY] * 4)
    assert np.allclose(r, [5.01, 5.01, 5.0, 5.0], rtol=0, atol=1e-12)
    assert done and env.absorbing


def test_pursuit_contested_cell_blocks_all_claimants():
    env = PursuitLite(n_evaders=1)
    # pursuers 0 and 1 both try to enter (3, 3)
    env.set_layout(pursuers=[(2, 3), (4, 3), (0, 7), (7, 7)], evaders=[(7, 0)])
    env.step([1, 0, STAY, STAY])
    assert tuple(env.pursuers[0]) == (2, 3) and tuple(env.pursuers[1]) == (4, 3)


def test_pursuit_corner_window_padding():
    env = PursuitLite(n_evaders=1)
    obs = env.set_layout(pursuers=[(0, 0), (0, 1), (5, 5), (6, 6)], evaders=[(1, 0)])
    walls, allies, evaders = obs[0].reshape(3, 5, 5)
    off_grid = np.zeros((5, 5), dtype=bool)
    off_grid[:2, :] = True
    off_grid[:, :2] = True
    assert np.all(walls[off_grid] == 1.0) and np.all(walls[~off_grid] == 0.0)
    assert np.all(allies[off_grid] == 0.0) and np.all(evaders[off_grid] == 0.0)
    assert allies[2, 2] == 1.0 and allies[2, 3] == 1.0 and evaders[3, 2] == 1.0


def test_pursuit_reset_determinism_and_variety():
    env = PursuitLite()
    a, b = env.reset(11), env.reset(11)
    assert np.array_equal(a, b)
    layouts = set()
    for seed in range(50):
        env.reset(seed)
        cells = [tuple(x) for x in np.vstack([env.pursuers, env.evaders])]
        assert len(set(cells)) == len(cells)
        layouts.add(tuple(cells))
    assert len(layouts) == 50


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pursuit_invariants_under_random_play(seed):
    env = PursuitLite()
    rng = np.random.default_rng(seed)
    env.reset(seed)
    catches = 0
    for _ in range(200):
        r, s, done = env.step(rng.integers(0, 5, size=4))
        assert np.all(np.isfinite(r)) and s.shape == (4, 75)
        live = [tuple(x) for x in env.evaders[env.alive]]
        cells = [tuple(x) for x in env.pursuers] + live
        assert len(set(cells)) == len(cells)
        assert np.all((env.pursuers >= 0) & (env.pursuers < 8))
        catches += int(np.round(r[0] // 5.0))
        if done:
            break
    assert done and env.t <= 100
    assert catches <= 4


def test_pursuit_trajectory_deterministic():
    def acts(t):
        return [(t + i) % 5 for i in range(4)]
    a, b = rollout(PursuitLite(), 5, acts), rollout(PursuitLite(), 5, acts)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_pursuit_bad_action_and_step_after_terminal():
    env = PursuitLite()
    env.reset(0)
    with pytest.raises(ValueError):
        env.step([5, 0, 0, 0])
    env.reset(0)
    for _ in range(100):
        _, _, done = env.step([STAY] * 4)
        if done:
            break
    with pytest.raises(StepAfterTerminal):
        env.step([STAY] * 4)


# -- CoopTargets ---------------------------------------------------------------------

def test_coop_zero_thrust_no_targets_zero_reward():
    env = CoopTargets()
    env.set_layout(pos=[(-0.8, -0.8), (0.8, -0.8), (0.0, 0.8)], targets=[(0.0, 0.0), (0.5, 0.0), (-0.5, 0.0)])
    r, _, _ = env.step(np.zeros((3, 2)))
    assert np.array_equal(r, np.zeros(3))


def test_coop_pair_consumes_and_target_respawns():
    env = CoopTargets()
    env.reset(0)
    env.set_layout(pos=[(0.0, 0.0), (0.05, 0.0), (0.8, 0.8)], targets=[(0.02, 0.0), (-0.6, 0.6), (0.6, -0.6)])
    r, _, _ = env.step(np.zeros((3, 2)))
    assert r[0] == 10.0 and r[1] == 10.0 and r[2] == 0.0
    assert not np.allclose(env.targets[0], (0.02, 0.0)) and env.consumed_total == 1
    assert np.all(np.linalg.norm(env.pos - env.targets[0], axis=1) > env.radius)


def test_coop_single_touch_and_thrust_cost():
    env = CoopTargets()
    env.set_layout(pos=[(0.0, 0.0), (0.8, 0.8), (-0.8, 0.8)], targets=[(0.0, 0.05), (-0.6, -0.6), (0.6, -0.6)])
    r, _, _ = env.step([(0.5, -0.5), (0.0, 0.0), (1.0, 1.0)])
    assert np.allclose(r, [0.01 - 0.01, 0.0, -0.02], rtol=0, atol=1e-15)


def test_coop_clamps_out_of_bound_thrust():
    env = CoopTargets()
    env.reset(0)
    env.step(np.full((3, 2), 3.0))
    assert env.clamped_actions == 1
    assert np.all(np.abs(env.vel) <= 0.2 + 1e-15)


def test_coop_positions_stay_in_arena_and_episode_length():
    env = CoopTargets()
    out = rollout(env, 4, lambda t: np.ones((3, 2)), steps=200)
    assert len(out) == 100 and out[-1][2] and not env.absorbing
    assert np.all(np.abs(env.pos) <= 1.0)


def test_coop_trajectory_deterministic():
    rng = np.random.default_rng(0)
    acts = rng.uniform(-1, 1, size=(100, 3, 2))
    a, b = rollout(CoopTargets(), 9, lambda t: acts[t]), rollout(CoopTargets(), 9, lambda t: acts[t])
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_coop_observation_is_homogeneous():
    env = CoopTargets()
    obs = env.reset(1)
    assert obs.shape == (3, env.obs_dim) == (3, 14)
    # relative target positions are consistent across agents
    assert np.allclose(obs[0, 4:6] + obs[0, :2], obs[1, 4:6] + obs[1, :2])


# -- shared plumbing -------------------------------------------------------------------

def test_make_env_and_unknown_name():
    assert isinstance(make_env("pursuit", n_pursuers=1), PursuitLite)
    with pytest.raises(ValueError):
        make_env("waterworld")


def test_trace_recorder_round_trip(tmp_path):
    env = PursuitLite()
    obs = env.reset(0)
    with TraceRecorder(tmp_path / "trace.jsonl") as rec:
        for t in range(3):
            a = [t % 5] * 4
            r, nxt, _ = env.step(a)
            rec.record(t, obs, a, r)
            obs = nxt
    rows = read_trace(tmp_path / "trace.jsonl")
    assert [row["t"] for row in rows] == [0, 1, 2]
    assert np.asarray(rows[0]["states"]).shape == (4, 75) and rows[2]["actions"] == [2] * 4
