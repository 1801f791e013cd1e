"""Diagonal-Gaussian policies over a flat parameter vector.

Layouts (row-major blocks, in order):

* ``linear``: W (A x F), b (A), log_std (A)
* ``mlp``:    W1 (H x F), b1 (H), W2 (A x H), b2 (A), log_std (A)

with F the feature count, A the action dimension and H the hidden width. The
log standard deviation is state independent and always occupies the last A
entries of ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

LOG_2PI = math.log(2.0 * math.pi)
ARCHS = ("linear", "mlp")


def _poly2(states):
    n = states.shape[-1]
    iu = np.triu_indices(n)
    quad = (states[..., :, None] * states[..., None, :])[..., iu[0], iu[1]]
    return np.concatenate([states, quad], axis=-1)


FEATURE_MAPS = {
    "identity": (lambda s: s, lambda n: n),
    "poly2": (_poly2, lambda n: n + n * (n + 1) // 2),
}


def n_features(feature_map: str, state_dim: int) -> int:
    try:
        return FEATURE_MAPS[feature_map][1](state_dim)
    except KeyError:
        raise ConfigError(f"unknown feature map {feature_map!r}") from None


def n_params(arch: str, n_feat: int, action_dim: int, hidden: int = 16) -> int:
    if arch == "linear":
        return action_dim * n_feat + 2 * action_dim
    if arch == "mlp":
        return hidden * n_feat + hidden + action_dim * hidden + 2 * action_dim
    raise ConfigError(f"unknown policy architecture {arch!r}; choose from {ARCHS}")


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    state_dim: int
    action_dim: int
    theta: np.ndarray
    arch: str = "linear"
    hidden: int = 16
    feature_map: str = "identity"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        expected = n_params(self.arch, n_features(self.feature_map, self.state_dim), self.action_dim, self.hidden)
        if theta.size != expected:
            raise UsageError(f"{self.arch} policy expects {expected} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta[-self.action_dim:])):
            raise UsageError("log_std entries must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @classmethod
    def create(cls, state_dim, action_dim, arch="linear", hidden=16, feature_map="identity",
               rng=None, log_std=0.0):
        """Zero-mean initial policy.

        Linear weights start at zero. MLP weights are drawn uniformly from
        +-1/sqrt(fan_in) (requires ``rng``) with zero biases.
        """
        n_feat = n_features(feature_map, state_dim)
        theta = np.zeros(n_params(arch, n_feat, action_dim, hidden))
        if arch == "mlp":
            if rng is None:
                raise UsageError("mlp initialisation needs an rng")
            w1 = rng.uniform(-1, 1, hidden * n_feat) / math.sqrt(n_feat)
            w2 = rng.uniform(-1, 1, action_dim * hidden) / math.sqrt(hidden)
            theta[:w1.size] = w1
            start = hidden * n_feat + hidden
            theta[start:start + w2.size] = w2
        theta[-action_dim:] = log_std
        return cls(state_dim, action_dim, theta, arch, hidden, feature_map)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_features(self) -> int:
        return n_features(self.feature_map, self.state_dim)

    def get_flat(self) -> np.ndarray:
        return self.theta.copy()

    def with_theta(self, theta) -> "GaussianPolicy":
        return GaussianPolicy(self.state_dim, self.action_dim, theta, self.arch, self.hidden, self.feature_map)

    set_flat = with_theta

    @property
    def log_std(self) -> np.ndarray:
        return self.theta[-self.action_dim:]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def _blocks(self, theta=None):
        theta = self.theta if theta is None else theta
        a, f = self.action_dim, self.n_features
        if self.arch == "linear":
            w = theta[:a * f].reshape(a, f)
            return w, theta[a * f:a * f + a]
        h = self.hidden
        i = 0
        w1 = theta[i:i + h * f].reshape(h, f); i += h * f
        b1 = theta[i:i + h]; i += h
        w2 = theta[i:i + a * h].reshape(a, h); i += a * h
        b2 = theta[i:i + a]
        return w1, b1, w2, b2

    def features(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[-1] != self.state_dim:
            raise UsageError(f"state has dimension {states.shape[-1]}, policy expects {self.state_dim}")
        return FEATURE_MAPS[self.feature_map][0](states)

    def _forward(self, states):
        phi = self.features(states)
        if self.arch == "linear":
            w, b = self._blocks()
            return phi, None, phi @ w.T + b
        w1, b1, w2, b2 = self._blocks()
        hid = np.tanh(phi @ w1.T + b1)
        return phi, hid, hid @ w2.T + b2

    def mean(self, states) -> np.ndarray:
        return self._forward(states)[2]

    def jvp(self, states, v) -> np.ndarray:
        """Directional derivative of the mean outputs, shape (N, A)."""
        phi, hid, _ = self._forward(states)
        if self.arch == "linear":
            dw, db = self._blocks(v)
            return phi @ dw.T + db
        dw1, db1, dw2, db2 = self._blocks(v)
        _, _, w2, _ = self._blocks()
        dhid = (1.0 - hid ** 2) * (phi @ dw1.T + db1)
        return dhid @ w2.T + hid @ dw2.T + db2

    def vjp(self, states, cotangent) -> np.ndarray:
        """Sum over states of J_i^T cotangent_i; zero in the log_std slot."""
        phi, hid, _ = self._forward(states)
        g = np.atleast_2d(cotangent)
        if self.arch == "linear":
            parts = [(g.T @ phi).ravel(), g.sum(axis=0)]
        else:
            _, _, w2, _ = self._blocks()
            gh = (g @ w2) * (1.0 - hid ** 2)
            parts = [(gh.T @ phi).ravel(), gh.sum(axis=0), (g.T @ hid).ravel(), g.sum(axis=0)]
        return np.concatenate(parts + [np.zeros(self.action_dim)])

    def sample_action(self, state, rng) -> np.ndarray:
        mu = self.mean(state)[0]
        return mu + self.std * rng.standard_normal(self.action_dim)

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        z = (np.atleast_2d(actions) - mu) / self.std
        return -0.5 * np.sum(z ** 2, axis=1) - np.sum(self.log_std) - 0.5 * self.action_dim * LOG_2PI

    def grad_log_prob(self, states, actions, weights=None) -> np.ndarray:
        """Sum over samples of ``weights_i * grad log pi(a_i | s_i)``."""
        mu = self.mean(states)
        var = self.std ** 2
        diff = np.atleast_2d(actions) - mu
        w = np.ones(len(diff)) if weights is None else np.asarray(weights, dtype=float)
        grad = self.vjp(states, w[:, None] * diff / var)
        grad[-self.action_dim:] = w @ (diff ** 2 / var - 1.0)
        return grad


def sample_action(policy: GaussianPolicy, state, rng) -> np.ndarray:
    return policy.sample_action(state, rng)


def log_prob(policy: GaussianPolicy, state, action) -> float:
    return float(policy.log_prob(state, action)[0])


def kl_states(p: GaussianPolicy, q: GaussianPolicy, states) -> np.ndarray:
    """Per-state KL(p(s) || q(s)) summed over action dimensions."""
    if p.action_dim != q.action_dim:
        raise UsageError("policies have different action dimensions")
    mp, mq = p.mean(states), q.mean(states)
    lp, lq = p.log_std, q.log_std
    var_ratio = np.exp(2 * (lp - lq))
    per_dim = lq - lp + 0.5 * (var_ratio + (mp - mq) ** 2 / np.exp(2 * lq)) - 0.5
    return np.maximum(per_dim.sum(axis=1), 0.0)


def kl_state(p: GaussianPolicy, q: GaussianPolicy, state) -> float:
    return float(kl_states(p, q, state)[0])


def mean_kl(p: GaussianPolicy, q: GaussianPolicy, states) -> float:
    states = np.atleast_2d(states)
    if states.shape[0] == 0 or states.size == 0:
        raise UsageError("mean_kl needs at least one state")
    return float(np.mean(kl_states(p, q, states)))


def kl_grad(p: GaussianPolicy, q: GaussianPolicy, states, weights=None) -> np.ndarray:
    """Sum over states of ``weights_i * grad_theta KL(p_theta(s_i) || q(s_i))`` w.r.t. p's parameters."""
    states = np.atleast_2d(states)
    w = np.ones(len(states)) if weights is None else np.asarray(weights, dtype=float)
    var_q = np.exp(2 * q.log_std)
    cot = w[:, None] * (p.mean(states) - q.mean(states)) / var_q
    grad = p.vjp(states, cot)
    grad[-p.action_dim:] = w.sum() * (np.exp(2 * (p.log_std - q.log_std)) - 1.0)
    return grad


@dataclass(frozen=True, eq=False)
class FisherOperator:
    """Damped Fisher information of the policy averaged over ``states``.

    Never materialises the matrix: products go through one Jacobian-vector
    and one vector-Jacobian product of the mean network.
    """

    states: np.ndarray
    policy: GaussianPolicy
    damping: float = 1e-2

    def __post_init__(self):
        if self.damping < 0:
            raise UsageError("damping must be non-negative")
        object.__setattr__(self, "states", np.atleast_2d(np.asarray(self.states, dtype=float)))

    @property
    def n(self) -> int:
        return self.policy.n_params

    def __call__(self, v) -> np.ndarray:
        return fisher_vector_product(self, v)

    def dense(self) -> np.ndarray:
        """Assemble the matrix column by column (small n only)."""
        return np.column_stack([self(e) for e in np.eye(self.n)])


def fisher_vector_product(op: FisherOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    pol = op.policy
    if v.shape != (pol.n_params,):
        raise UsageError(f"vector has shape {v.shape}, expected ({pol.n_params},)")
    n_states = len(op.states)
    inv_var = np.exp(-2 * pol.log_std)
    out = pol.vjp(op.states, pol.jvp(op.states, v) * inv_var) / n_states
    out[-pol.action_dim:] = 2.0 * v[-pol.action_dim:]
    return out + op.damping * v


def surrogate(policy: GaussianPolicy, states, actions, advantages, ref_theta) -> float:
    """Importance-weighted advantage ``mean(pi_theta / pi_ref * A)`` at ``policy.theta``."""
    ref = policy.with_theta(ref_theta)
    ratio = np.exp(policy.log_prob(states, actions) - ref.log_prob(states, actions))
    return float(np.mean(ratio * advantages))


def grad_surrogate(policy: GaussianPolicy, batch, advantages, ref_theta=None) -> np.ndarray:
    """Gradient of :func:`surrogate` at ``theta = ref_theta``: the per-step mean of score x advantage."""
    advantages = np.asarray(advantages, dtype=float)
    if len(advantages) != batch.n_steps:
        raise UsageError(f"{len(advantages)} advantages for a batch of {batch.n_steps} steps")
    if batch.n_steps == 0:
        raise UsageError("empty batch")
    pol = policy if ref_theta is None else policy.with_theta(ref_theta)
    return pol.grad_log_prob(batch.states, batch.actions, advantages) / batch.n_steps
