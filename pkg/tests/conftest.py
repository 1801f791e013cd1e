import numpy as np
import pytest

from spacerl.envs import Batch, Trajectory, point_circle_env
from spacerl.policy import GaussianPolicy


def make_batch(rng, lengths, state_dim=3, action_dim=1, costs=None):
    trajs = []
    for n in lengths:
        c = rng.uniform(0, 1, n) if costs is None else np.full(n, float(costs))
        trajs.append(Trajectory(rng.normal(size=(n, state_dim)), rng.normal(size=(n, action_dim)),
                                rng.normal(size=n), c))
    return Batch(tuple(trajs))


def random_policy(rng, state_dim=3, action_dim=1, arch="linear", hidden=4, scale=0.5):
    base = GaussianPolicy.create(state_dim, action_dim, arch, hidden, rng=rng)
    return base.with_theta(rng.normal(scale=scale, size=base.n_params))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def circle():
    return point_circle_env()
