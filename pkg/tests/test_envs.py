import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spacerl.envs import (DT, V_MAX, Batch, EnvSpec, GridGather, Trajectory, circle_cost, circle_reward,
                          grid_gather_env, make_env, point_circle_env, rollout)
from spacerl.errors import ConfigError, UsageError
from spacerl.policy import GaussianPolicy

from conftest import random_policy

finite = st.floats(-10, 10, allow_nan=False)


def test_circle_reward_on_circle():
    assert circle_reward([5.0, 0.0], [0.0, 1.0], 5.0) == pytest.approx(5.0)


def test_origin_at_rest_is_free():
    assert circle_reward([0.0, 0.0], [0.0, 0.0], 5.0) == 0.0
    assert circle_cost([0.0, 0.0], 2.5) == 0.0


def test_cost_outside_band():
    assert circle_cost([3.0, 0.0], 2.5) == 1.0
    assert circle_cost([-3.0, 7.0], 2.5) == 1.0
    assert circle_cost([2.5, 0.0], 2.5) == 0.0


@given(st.tuples(finite, finite), st.tuples(finite, finite))
def test_reward_bounded_by_speed_times_radius(x, v):
    r = circle_reward(np.array(x), np.array(v), 5.0)
    assert abs(r) <= np.linalg.norm(v) * np.linalg.norm(x) + 1e-12


@pytest.mark.parametrize("kwargs", [dict(d=0.0), dict(d=5.0, x_lim=6.0), dict(x_lim=0.0), dict(horizon=0),
                                    dict(gamma=1.0)])
def test_point_circle_rejects_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        point_circle_env(**kwargs)


def test_point_mass_step():
    env = point_circle_env()
    s = np.array([1.0, 0.0, 0.0, 1.95])
    nxt, res = env.step(s, np.array([0.0, 1.0]))
    np.testing.assert_allclose(nxt, [1.0, 0.0 + DT * 1.95, 0.0, V_MAX])
    assert res.reward == pytest.approx(circle_reward(nxt[:2], nxt[2:], 5.0))
    assert not res.done


def _gather_state(env, agent, items):
    n = env.n_items
    return np.concatenate([agent, [0.0, 0.0], np.asarray(items, float).ravel(), np.ones(n)])


def test_gather_green_hit():
    env = grid_gather_env(n_green=1, n_red=1)
    s = _gather_state(env, [2.5, 2.5], [[2.5, 2.5], [0.5, 0.5]])
    nxt, res = env.step(s, np.zeros(2))
    assert (res.reward, res.cost) == (10.0, 0.0)
    _, res = env.step(nxt, np.zeros(2))
    assert (res.reward, res.cost) == (0.0, 0.0)  # item consumed


def test_gather_red_hit():
    env = grid_gather_env(n_green=1, n_red=1)
    s = _gather_state(env, [2.5, 2.5], [[0.5, 0.5], [2.6, 2.5]])
    _, res = env.step(s, np.zeros(2))
    assert (res.reward, res.cost) == (0.0, 1.0)


def test_gather_no_event():
    env = grid_gather_env(n_green=1, n_red=1)
    s = _gather_state(env, [2.5, 2.5], [[0.5, 0.5], [4.5, 4.5]])
    _, res = env.step(s, np.zeros(2))
    assert (res.reward, res.cost) == (0.0, 0.0)


def test_gather_observation_points_to_nearest_live_items():
    env = grid_gather_env(n_green=2, n_red=1)
    s = _gather_state(env, [2.0, 2.0], [[3.0, 2.0], [0.5, 0.5], [2.0, 4.0]])
    obs = env.observe(s)[0]
    np.testing.assert_allclose(obs, [2.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0])


def test_gather_rejects_small_arena():
    with pytest.raises(ConfigError):
        grid_gather_env(size=2)


def test_make_env_unknown():
    with pytest.raises(ConfigError):
        make_env("mujoco_ant")
    with pytest.raises(ConfigError):
        make_env("point_circle", {"radius": 3})


def test_env_spec_validation():
    with pytest.raises(ConfigError):
        EnvSpec(4, 2, 10, gamma_cost=0.0)
    with pytest.raises(ConfigError):
        EnvSpec(0, 2, 10)


def test_rollout_zero_budget(circle):
    pol = GaussianPolicy.create(4, 2)
    assert rollout(circle, pol, 0, seed=3).n_steps == 0


def test_rollout_episode_count(circle):
    batch = rollout(circle, GaussianPolicy.create(4, 2), 100, seed=0)
    assert batch.n_episodes == 2
    assert batch.n_steps == 100


def test_rollout_rounds_up_to_whole_episodes(circle):
    batch = rollout(circle, GaussianPolicy.create(4, 2), 101, seed=0)
    assert batch.n_episodes == 3


def _assert_batches_equal(b1, b2):
    assert b1.n_episodes == b2.n_episodes
    for t1, t2 in zip(b1, b2):
        for name in ("states", "actions", "rewards", "costs"):
            np.testing.assert_array_equal(getattr(t1, name), getattr(t2, name))


def test_rollout_deterministic(circle, rng):
    pol = random_policy(rng, 4, 2)
    _assert_batches_equal(rollout(circle, pol, 400, 17), rollout(circle, pol, 400, 17))


def test_rollout_prefix_consistent(circle, rng):
    pol = random_policy(rng, 4, 2)
    small, big = rollout(circle, pol, 100, 5), rollout(circle, pol, 250, 5)
    _assert_batches_equal(small, Batch(big.trajectories[:2]))


def test_rollout_env_stream_independent_of_policy(circle, rng):
    b1 = rollout(circle, random_policy(rng, 4, 2), 200, 9)
    b2 = rollout(circle, random_policy(rng, 4, 2), 200, 9)
    np.testing.assert_array_equal(b1.states[::50], b2.states[::50])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["point_circle", "grid_gather"]))
def test_rollout_invariants(seed, name):
    env = make_env(name)
    pol = GaussianPolicy.create(env.spec.state_dim, env.spec.action_dim, log_std=0.5)
    batch = rollout(env, pol, 3 * env.spec.horizon, seed)
    assert np.all(batch.costs >= 0)
    assert all(1 <= n <= env.spec.horizon for n in batch.lengths)
    if name == "point_circle":
        x, v = batch.states[:, :2], batch.states[:, 2:]
        # states are pre-step; rewards come from the post-step state, so recheck via the env
        nxt, r, _, _ = env.step_batch(batch.states, batch.actions)
        np.testing.assert_allclose(r, batch.rewards)
        assert np.all(np.abs(r) <= np.linalg.norm(nxt[:, 2:], axis=1) * np.linalg.norm(nxt[:, :2], axis=1) + 1e-12)
        assert np.all(np.abs(v) <= V_MAX + 1e-12) and x.shape[1] == 2


def test_trajectory_validation():
    with pytest.raises(UsageError):
        Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(3), np.zeros(3))
    with pytest.raises(UsageError):
        Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2), np.zeros(2), np.array([0.1, -0.1]))


def test_batch_split_and_divergences(rng):
    t1 = Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), np.array([1.0, 2.0]), np.zeros(2))
    t2 = Trajectory(np.zeros((1, 1)), np.zeros((1, 1)), np.array([3.0]), np.zeros(1))
    batch = Batch((t1, t2))
    np.testing.assert_array_equal(batch.timesteps, [0, 1, 0])
    pieces = batch.split(batch.rewards)
    assert [p.tolist() for p in pieces] == [[1.0, 2.0], [3.0]]
    with_d = batch.with_divergences(np.array([0.1, 0.2, 0.3]))
    np.testing.assert_array_equal(with_d.divergences, [0.1, 0.2, 0.3])
    assert isinstance(grid_gather_env(), GridGather)
