"""Desk-scale CMDP environments and batched trajectory collection.

Environments are stateless dynamics objects. The episode state lives in a flat
float array so that many episodes can be advanced together with one call to
``step_batch``. Randomness enters only through ``reset`` and through the
action noise drawn in :func:`rollout`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

DT = 0.1
V_MAX = 2.0


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float = 0.995
    gamma_cost: float = 1.0
    gamma_div: float = 1.0

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ConfigError("state_dim and action_dim must be positive")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("gamma_cost", "gamma_div"):
            g = getattr(self, name)
            if not 0.0 < g <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {g}")


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    cost: float
    done: bool


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    divergences: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.rewards)
        if self.divergences is None:
            object.__setattr__(self, "divergences", np.zeros(n))
        for name in ("states", "actions", "costs", "divergences"):
            if len(getattr(self, name)) != n:
                raise UsageError(f"trajectory field {name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(self.divergences < 0):
            raise UsageError("divergences must be non-negative")

    def __len__(self):
        return len(self.rewards)


@dataclass(frozen=True)
class Batch:
    """An ordered collection of trajectories with flattened per-step views."""

    trajectories: tuple = ()

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_episodes(self) -> int:
        return len(self.trajectories)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=int)

    @property
    def n_steps(self) -> int:
        return int(self.lengths.sum()) if self.trajectories else 0

    def _cat(self, name):
        if not self.trajectories:
            return np.zeros(0)
        return np.concatenate([getattr(t, name) for t in self.trajectories])

    @cached_property
    def states(self) -> np.ndarray:
        return self._cat("states")

    @cached_property
    def actions(self) -> np.ndarray:
        return self._cat("actions")

    @cached_property
    def rewards(self) -> np.ndarray:
        return self._cat("rewards")

    @cached_property
    def costs(self) -> np.ndarray:
        return self._cat("costs")

    @cached_property
    def divergences(self) -> np.ndarray:
        return self._cat("divergences")

    @cached_property
    def timesteps(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(n) for n in self.lengths])

    def split(self, flat: np.ndarray) -> list:
        """Cut a per-step array back into per-episode pieces."""
        flat = np.asarray(flat)
        if len(flat) != self.n_steps:
            raise UsageError(f"per-step array has length {len(flat)}, batch has {self.n_steps} steps")
        return np.split(flat, np.cumsum(self.lengths)[:-1]) if self.trajectories else []

    def with_divergences(self, flat: np.ndarray) -> "Batch":
        pieces = self.split(flat)
        return Batch(tuple(
            Trajectory(t.states, t.actions, t.rewards, t.costs, np.asarray(p, dtype=float))
            for t, p in zip(self.trajectories, pieces)
        ))


class CMDPEnv:
    """Base class: subclasses define reset, observe and step_batch."""

    name = "base"
    spec: EnvSpec

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def observe(self, internal: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step_batch(self, internal: np.ndarray, actions: np.ndarray):
        """Advance E episodes at once.

        Returns ``(internal', rewards, costs, done)`` with leading dimension E.
        """
        raise NotImplementedError

    def step(self, internal, action):
        nxt, r, c, d = self.step_batch(np.atleast_2d(internal), np.atleast_2d(action))
        return nxt[0], StepResult(self.observe(nxt)[0], float(r[0]), float(c[0]), bool(d[0]))

    def params(self) -> dict:
        return {}


def _point_mass(x, v, a):
    x_new = x + DT * v
    v_new = np.clip(v + DT * a, -V_MAX, V_MAX)
    return x_new, v_new


def circle_reward(x, v, d):
    """Tangential speed scaled by closeness of the radius to ``d``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    tangent = np.stack([-x[..., 1], x[..., 0]], axis=-1)
    radius = np.linalg.norm(x, axis=-1)
    return np.sum(v * tangent, axis=-1) / (1.0 + np.abs(radius - d))


def circle_cost(x, x_lim):
    x = np.asarray(x, dtype=float)
    return (np.abs(x[..., 0]) > x_lim).astype(float)


class PointCircle(CMDPEnv):
    """Point mass rewarded for circling at radius ``d`` while kept inside ``|x1| <= x_lim``.

    State is ``(x1, x2, v1, v2)``; actions are velocity increments. Episodes
    start near the origin with a random heading so an untrained policy drifts
    out of the safe band.
    """

    name = "point_circle"

    def __init__(self, d=5.0, x_lim=2.5, horizon=50, gamma=0.995, gamma_cost=1.0, gamma_div=1.0,
                 init_radius=0.5, init_speed=1.5):
        if not d > 0:
            raise ConfigError(f"point_circle: d must be positive, got {d}")
        if not 0 < x_lim <= d:
            raise ConfigError(f"point_circle: need 0 < x_lim <= d, got x_lim={x_lim}, d={d}")
        if init_radius < 0 or not 0 <= init_speed <= V_MAX:
            raise ConfigError("point_circle: invalid initial-state parameters")
        self.d = float(d)
        self.x_lim = float(x_lim)
        self.init_radius = float(init_radius)
        self.init_speed = float(init_speed)
        self.spec = EnvSpec(4, 2, int(horizon), gamma, gamma_cost, gamma_div)

    def params(self):
        return dict(d=self.d, x_lim=self.x_lim, horizon=self.spec.horizon, gamma=self.spec.gamma,
                    gamma_cost=self.spec.gamma_cost, gamma_div=self.spec.gamma_div,
                    init_radius=self.init_radius, init_speed=self.init_speed)

    def reset(self, rng):
        u = rng.random(4)
        r = self.init_radius * math.sqrt(u[0])
        phi = 2 * math.pi * u[1]
        speed = self.init_speed * u[2]
        heading = 2 * math.pi * u[3]
        return np.array([r * math.cos(phi), r * math.sin(phi),
                         speed * math.cos(heading), speed * math.sin(heading)])

    def observe(self, internal):
        return internal

    def step_batch(self, internal, actions):
        x, v = _point_mass(internal[:, :2], internal[:, 2:4], actions)
        nxt = np.concatenate([x, v], axis=1)
        reward = circle_reward(x, v, self.d)
        cost = circle_cost(x, self.x_lim)
        return nxt, reward, cost, np.zeros(len(nxt), dtype=bool)


class GridGather(CMDPEnv):
    """Point mass in a ``[0, size]^2`` box collecting green (+10 reward) and red (+1 cost) disks.

    Internal layout: ``x(2) v(2) item_xy(2n) alive(n)`` with green items first.
    Observation: position, velocity, offset to nearest live green item, offset
    to nearest live red item (zeros when none remain).
    """

    name = "grid_gather"
    item_radius = 0.3

    def __init__(self, n_green=2, n_red=8, size=5.0, horizon=15, gamma=0.995, gamma_cost=1.0, gamma_div=1.0):
        if n_green < 0 or n_red < 0:
            raise ConfigError("grid_gather: item counts must be non-negative")
        if size < 3:
            raise ConfigError(f"grid_gather: size must be >= 3, got {size}")
        self.n_green = int(n_green)
        self.n_red = int(n_red)
        self.size = float(size)
        self.spec = EnvSpec(8, 2, int(horizon), gamma, gamma_cost, gamma_div)

    @property
    def n_items(self):
        return self.n_green + self.n_red

    def params(self):
        return dict(n_green=self.n_green, n_red=self.n_red, size=self.size, horizon=self.spec.horizon,
                    gamma=self.spec.gamma, gamma_cost=self.spec.gamma_cost, gamma_div=self.spec.gamma_div)

    def reset(self, rng):
        items = rng.uniform(0.5, self.size - 0.5, size=(self.n_items, 2))
        centre = self.size / 2
        return np.concatenate([[centre, centre, 0.0, 0.0], items.ravel(), np.ones(self.n_items)])

    def _unpack(self, internal):
        n = self.n_items
        items = internal[:, 4:4 + 2 * n].reshape(-1, n, 2)
        alive = internal[:, 4 + 2 * n:4 + 3 * n]
        return internal[:, :2], internal[:, 2:4], items, alive

    def _nearest(self, x, items, alive, sl):
        e = len(x)
        if sl.stop - sl.start == 0:
            return np.zeros((e, 2))
        rel = items[:, sl] - x[:, None, :]
        dist = np.where(alive[:, sl] > 0, np.linalg.norm(rel, axis=-1), np.inf)
        k = np.argmin(dist, axis=1)
        out = rel[np.arange(e), k]
        return np.where(np.isfinite(dist[np.arange(e), k])[:, None], out, 0.0)

    def observe(self, internal):
        x, v, items, alive = self._unpack(np.atleast_2d(internal))
        green = self._nearest(x, items, alive, slice(0, self.n_green))
        red = self._nearest(x, items, alive, slice(self.n_green, self.n_items))
        return np.concatenate([x, v, green, red], axis=1)

    def step_batch(self, internal, actions):
        x, v, items, alive = self._unpack(internal)
        x, v = _point_mass(x, v, actions)
        x = np.clip(x, 0.0, self.size)
        hit = (np.linalg.norm(items - x[:, None, :], axis=-1) <= self.item_radius) & (alive > 0)
        reward = 10.0 * hit[:, :self.n_green].sum(axis=1)
        cost = 1.0 * hit[:, self.n_green:].sum(axis=1)
        alive = np.where(hit, 0.0, alive)
        nxt = np.concatenate([x, v, items.reshape(len(x), -1), alive], axis=1)
        return nxt, reward, cost, np.zeros(len(x), dtype=bool)


def point_circle_env(d=5.0, x_lim=2.5, **kwargs) -> PointCircle:
    return PointCircle(d=d, x_lim=x_lim, **kwargs)


def grid_gather_env(n_green=2, n_red=8, size=5.0, **kwargs) -> GridGather:
    return GridGather(n_green=n_green, n_red=n_red, size=size, **kwargs)


ENVIRONMENTS = {"point_circle": PointCircle, "grid_gather": GridGather}


def make_env(name: str, params: dict | None = None) -> CMDPEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    try:
        return cls(**(params or {}))
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def episode_streams(seed: int, index: int):
    """Independent (environment, action) generators for one episode."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    env_ss, act_ss = ss.spawn(2)
    return np.random.Generator(np.random.Philox(env_ss)), np.random.Generator(np.random.Philox(act_ss))


class EnvStepError(RuntimeError):
    pass


def _run_episodes(env: CMDPEnv, policy, seed: int, indices: Sequence[int]) -> list:
    spec = env.spec
    horizon, n_act = spec.horizon, spec.action_dim
    internal, noise = [], []
    for i in indices:
        env_rng, act_rng = episode_streams(seed, i)
        internal.append(env.reset(env_rng))
        noise.append(act_rng.standard_normal((horizon, n_act)))
    internal = np.array(internal)
    noise = np.stack(noise, axis=1)  # (horizon, E, A)
    e = len(indices)
    std = policy.std

    obs_buf = np.zeros((horizon, e, spec.state_dim))
    act_buf = np.zeros((horizon, e, n_act))
    rew_buf = np.zeros((horizon, e))
    cost_buf = np.zeros((horizon, e))
    length = np.full(e, horizon)
    running = np.ones(e, dtype=bool)
    for t in range(horizon):
        obs = env.observe(internal)
        act = policy.mean(obs) + std * noise[t]
        try:
            internal, r, c, done = env.step_batch(internal, act)
        except Exception as exc:
            raise EnvStepError(f"{env.name}: step {t} failed for trajectories {list(indices)}: {exc}") from exc
        bad = ~(np.isfinite(r) & np.isfinite(c) & np.all(np.isfinite(internal), axis=1))
        if np.any(bad & running):
            k = int(np.flatnonzero(bad & running)[0])
            raise NumericalError(f"{env.name}: non-finite step result in trajectory {indices[k]} at step {t}")
        obs_buf[t], act_buf[t], rew_buf[t], cost_buf[t] = obs, act, r, c
        finished = running & done
        length[finished] = t + 1
        running &= ~done
        if not running.any():
            break

    return [
        Trajectory(obs_buf[:n, j].copy(), act_buf[:n, j].copy(), rew_buf[:n, j].copy(), cost_buf[:n, j].copy())
        for j, n in enumerate(length)
    ]


def rollout(env: CMDPEnv, policy, n_steps: int, seed: int) -> Batch:
    """Collect whole episodes until at least ``n_steps`` environment steps are stored.

    Episode ``i`` draws from streams keyed on ``(seed, i)``, so the result
    does not depend on how episodes are grouped for vectorised stepping.
    """
    if n_steps < 0:
        raise UsageError(f"n_steps must be non-negative, got {n_steps}")
    if seed < 0:
        raise UsageError("seed must be a non-negative integer")
    horizon = env.spec.horizon
    episodes, total, next_index = [], 0, 0
    while total < n_steps:
        wave = math.ceil((n_steps - total) / horizon)
        for traj in _run_episodes(env, policy, seed, range(next_index, next_index + wave)):
            if total >= n_steps:
                break
            episodes.append(traj)
            total += len(traj)
        next_index += wave
    return Batch(tuple(episodes))
