"""Objective estimates, linear value baselines, GAE and the per-iteration gradient set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import Batch, EnvSpec
from .errors import UsageError
from .policy import FisherOperator, GaussianPolicy, grad_surrogate, kl_grad, kl_states

SIGNALS = ("R", "C", "D")
RIDGE = 1e-5


@dataclass(frozen=True)
class ObjectiveEstimates:
    J_R: float
    J_C: float
    J_D: float
    h_D: float
    h_C: float

    @property
    def b_k(self) -> float:
        return self.J_D - self.h_D

    @property
    def d_k(self) -> float:
        return self.J_C - self.h_C


@dataclass(frozen=True)
class AdvantageSet:
    adv_R: np.ndarray
    adv_C: np.ndarray
    adv_D: np.ndarray
    normalized_R: bool = True


@dataclass(frozen=True, eq=False)
class GradientSet:
    g: np.ndarray
    a: np.ndarray
    c: np.ndarray
    fisher: FisherOperator


@dataclass(frozen=True)
class Thresholds:
    h_C: float
    h_D: float = 0.0


@dataclass(frozen=True)
class EstimatorConfig:
    lam_R: float = 0.95
    lam_C: float = 1.0
    lam_D: float = 0.95
    damping: float = 1e-2
    normalize_reward: bool = True


def discounted_return(values, gamma: float) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(np.sum(values * gamma ** np.arange(values.size)))


def _padded(batch: Batch, flat) -> np.ndarray:
    out = np.zeros((batch.n_episodes, int(batch.lengths.max(initial=0))))
    for i, piece in enumerate(batch.split(flat)):
        out[i, :len(piece)] = piece
    return out


def _unpad(batch: Batch, mat) -> np.ndarray:
    if batch.n_episodes == 0:
        return np.zeros(0)
    return np.concatenate([mat[i, :n] for i, n in enumerate(batch.lengths)])


def _reverse_discount(mat, factor):
    out = np.zeros_like(mat)
    running = np.zeros(mat.shape[0])
    for t in range(mat.shape[1] - 1, -1, -1):
        running = mat[:, t] + factor * running
        out[:, t] = running
    return out


def returns_to_go(batch: Batch, values, gamma: float) -> np.ndarray:
    """Per-step discounted sum of the remaining signal within each episode."""
    return _unpad(batch, _reverse_discount(_padded(batch, values), gamma))


def signal_values(batch: Batch, signal: str) -> np.ndarray:
    try:
        return {"R": batch.rewards, "C": batch.costs, "D": batch.divergences}[signal]
    except KeyError:
        raise UsageError(f"unknown signal {signal!r}; choose from {SIGNALS}") from None


def divergence_stream(batch: Batch, policy: GaussianPolicy, baseline_policy: GaussianPolicy) -> np.ndarray:
    """KL(policy(s_t) || baseline(s_t)) at every visited state.

    Use ``batch.with_divergences`` to attach the result to the trajectories.
    """
    if policy.action_dim != baseline_policy.action_dim:
        raise UsageError("policy and baseline policy have different action dimensions")
    if batch.n_steps == 0:
        return np.zeros(0)
    return kl_states(policy, baseline_policy, batch.states)


def baseline_features(states, timesteps, time_scale: float) -> np.ndarray:
    states = np.atleast_2d(states)
    n, k = states.shape
    iu = np.triu_indices(k)
    quad = (states[:, :, None] * states[:, None, :])[:, iu[0], iu[1]]
    t = np.asarray(timesteps, dtype=float)[:, None] / time_scale
    return np.concatenate([np.ones((n, 1)), states, quad, t, t ** 2, t ** 3], axis=1)


@dataclass(frozen=True, eq=False)
class ValueBaseline:
    """Ridge-regularised linear fit of discounted returns-to-go."""

    weights: np.ndarray
    signal: str
    gamma: float
    time_scale: float

    def predict(self, batch: Batch) -> np.ndarray:
        if batch.n_steps == 0:
            return np.zeros(0)
        return baseline_features(batch.states, batch.timesteps, self.time_scale) @ self.weights


def fit_baseline(batch: Batch, signal: str, gamma: float, ridge: float = RIDGE) -> ValueBaseline:
    if batch.n_steps == 0:
        raise UsageError("cannot fit a baseline on an empty batch")
    targets = returns_to_go(batch, signal_values(batch, signal), gamma)
    time_scale = float(max(batch.lengths.max(), 1))
    x = baseline_features(batch.states, batch.timesteps, time_scale)
    k = x.shape[1]
    lhs = np.vstack([x, np.sqrt(ridge) * np.eye(k)])
    rhs = np.concatenate([targets, np.zeros(k)])
    w = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return ValueBaseline(w, signal, gamma, time_scale)


def gae_advantages(batch: Batch, values, predictions, gamma: float, lam: float) -> np.ndarray:
    """GAE-lambda with V = 0 after the last step of every episode."""
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"GAE lambda must lie in [0, 1], got {lam}")
    v = _padded(batch, predictions)
    r = _padded(batch, values)
    mask = _padded(batch, np.ones(batch.n_steps))
    v_next = np.zeros_like(v)
    v_next[:, :-1] = v[:, 1:] * mask[:, 1:]
    deltas = (r + gamma * v_next - v) * mask
    return _unpad(batch, _reverse_discount(deltas, gamma * lam))


def gae(batch: Batch, baseline: ValueBaseline | None, gamma: float, lam: float, signal: str | None = None) -> np.ndarray:
    if baseline is None and signal is None:
        raise UsageError("gae needs a baseline or an explicit signal")
    signal = baseline.signal if baseline is not None else signal
    preds = baseline.predict(batch) if baseline is not None else np.zeros(batch.n_steps)
    return gae_advantages(batch, signal_values(batch, signal), preds, gamma, lam)


def episode_mean_return(batch: Batch, signal: str, gamma: float) -> float:
    pieces = batch.split(signal_values(batch, signal))
    return float(np.mean([discounted_return(p, gamma) for p in pieces]))


def estimate_iteration(batch: Batch, policy: GaussianPolicy, baseline_policy: GaussianPolicy | None,
                       thresholds: Thresholds, spec: EnvSpec, config: EstimatorConfig = EstimatorConfig()):
    """Objective estimates, advantages and the gradient set for one update.

    The constraint gradients ``a`` and ``c`` are expressed per episode so that
    ``a . (theta - theta_k) + b_k`` approximates the divergence objective after
    the step, and likewise for the cost. ``a`` also carries the direct
    dependence of each per-state KL on the policy parameters.

    Returns ``(ObjectiveEstimates, GradientSet, AdvantageSet)``.
    """
    if batch.n_steps == 0:
        raise UsageError("estimate_iteration needs a non-empty batch")
    if baseline_policy is not None:
        batch = batch.with_divergences(divergence_stream(batch, policy, baseline_policy))

    est = ObjectiveEstimates(
        J_R=episode_mean_return(batch, "R", spec.gamma),
        J_C=episode_mean_return(batch, "C", spec.gamma_cost),
        J_D=episode_mean_return(batch, "D", spec.gamma_div),
        h_D=float(thresholds.h_D),
        h_C=float(thresholds.h_C),
    )

    adv_r = gae(batch, fit_baseline(batch, "R", spec.gamma), spec.gamma, config.lam_R)
    if config.normalize_reward and adv_r.size > 1:
        adv_r = (adv_r - adv_r.mean()) / (adv_r.std() + 1e-8)
    adv_c = gae(batch, fit_baseline(batch, "C", spec.gamma_cost), spec.gamma_cost, config.lam_C)
    if baseline_policy is not None:
        adv_d = gae(batch, fit_baseline(batch, "D", spec.gamma_div), spec.gamma_div, config.lam_D)
    else:
        adv_d = np.zeros(batch.n_steps)

    steps_per_episode = batch.n_steps / batch.n_episodes
    w_c = spec.gamma_cost ** batch.timesteps
    w_d = spec.gamma_div ** batch.timesteps
    g = grad_surrogate(policy, batch, adv_r)
    c = steps_per_episode * grad_surrogate(policy, batch, adv_c * w_c)
    if baseline_policy is not None:
        a = steps_per_episode * grad_surrogate(policy, batch, adv_d * w_d)
        a = a + kl_grad(policy, baseline_policy, batch.states, w_d) / batch.n_episodes
    else:
        a = np.zeros_like(g)
    grads = GradientSet(g, a, c, FisherOperator(batch.states, policy, config.damping))
    return est, grads, AdvantageSet(adv_r, adv_c, adv_d, config.normalize_reward)
