"""Training loops for SPACE and the five comparison algorithms."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .envs import CMDPEnv, rollout
from .errors import ConfigError
from .estimation import EstimatorConfig, Thresholds, estimate_iteration
from .policy import GaussianPolicy
from .subproblem import LinearConstraint, Metric, cpo_update, space_update

ALGORITHMS = ("SPACE", "PCPO", "fCPO", "fPCPO", "dCPO", "dPCPO")
USES_BASELINE = {"SPACE", "fCPO", "fPCPO", "dCPO", "dPCPO"}


@dataclass(frozen=True)
class AlgoConfig:
    algo: str = "SPACE"
    delta: float = 1e-4
    h_c: float = 5.0
    h_d0: float = 5.0
    v: float = 10.0
    lambda0: float = 1.0
    beta: float = 0.9
    metric: str = "KL"
    batch_steps: int = 4000
    n_iters: int = 150
    seed: int = 0
    use_cost: bool = True
    chain_projections: bool = False
    lam_r: float = 0.95
    lam_c: float = 1.0
    lam_d: float = 0.95
    damping: float = 1e-2
    cg_iters: int = 20
    cg_tol: float = 1e-10
    arch: str = "linear"
    hidden: int = 16
    feature_map: str = "identity"
    init_log_std: float = 0.0

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; choose from {ALGORITHMS}")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not self.v > 0:
            raise ConfigError("v must be positive")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        if not self.lambda0 > 0:
            raise ConfigError("lambda0 must be positive")
        if self.metric not in ("KL", "TwoNorm"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.batch_steps < 1 or self.n_iters < 0 or self.seed < 0:
            raise ConfigError("batch_steps must be positive, n_iters and seed non-negative")
        for name in ("lam_r", "lam_c", "lam_d"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @property
    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self.lam_r, self.lam_c, self.lam_d, self.damping)


@dataclass(frozen=True)
class HdController:
    """Adaptive divergence threshold.

    Grows by ``v * (J_C - h_C)^2`` whenever the cost estimate rose or the
    reward estimate fell relative to the previous iteration.
    """

    h_d: float
    v: float = 10.0
    prev_j_c: float | None = None
    prev_j_r: float | None = None

    def update(self, j_c: float, j_r: float, h_c: float) -> "HdController":
        h_d = self.h_d
        if self.prev_j_c is not None and (j_c > self.prev_j_c or j_r < self.prev_j_r):
            h_d = self.v * (j_c - h_c) ** 2 + self.h_d
        return HdController(h_d, self.v, float(j_c), float(j_r))


def update_h_d(ctrl: HdController, est, h_c: float) -> HdController:
    return ctrl.update(est.J_C, est.J_R, h_c)


def update_lambda(lam: float, beta: float) -> float:
    if not lam > 0:
        raise ConfigError("lambda must be positive")
    return lam ** beta


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    J_R: float
    J_C: float
    J_D: float
    h_D: float
    lam: float
    active: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def key(self):
        """Everything except wall time, for reproducibility comparisons."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass(frozen=True)
class TrainState:
    policy: GaussianPolicy
    hd: HdController
    lam: float
    iteration: int = 0


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


def initial_policy(config: AlgoConfig, env: CMDPEnv) -> GaussianPolicy:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(config.seed), 0xC0FFEE])))
    return GaussianPolicy.create(env.spec.state_dim, env.spec.action_dim, config.arch, config.hidden,
                                 config.feature_map, rng=rng, log_std=config.init_log_std)


def initial_state(config: AlgoConfig, env: CMDPEnv, policy: GaussianPolicy | None = None) -> TrainState:
    return TrainState(policy or initial_policy(config, env), HdController(config.h_d0, config.v),
                      config.lambda0, 0)


def train_iteration(state: TrainState, env: CMDPEnv, baseline_policy, config: AlgoConfig):
    """Rollout, estimate, update, adapt h_D / lambda. Returns ``(new_state, record)``."""
    t0 = time.perf_counter()
    algo = config.algo
    if algo in USES_BASELINE and baseline_policy is None:
        raise ConfigError(f"{algo} needs a baseline policy")
    policy = state.policy
    try:
        batch = rollout(env, policy, config.batch_steps, iteration_seed(config.seed, state.iteration))
        h_c = config.h_c if config.use_cost else np.inf
        est, grads, _ = estimate_iteration(batch, policy, baseline_policy, Thresholds(h_c, state.hd.h_d),
                                           env.spec, config.estimator)
        metric = Metric(config.metric, grads.fisher if config.metric == "KL" else None,
                        config.cg_iters, config.cg_tol)
        theta = policy.theta
        cg = dict(cg_iters=config.cg_iters, cg_tol=config.cg_tol)
        if algo == "SPACE":
            res = space_update(theta, grads, est, config.delta, metric,
                               chain_projections=config.chain_projections, **cg)
        elif algo == "PCPO":
            res = space_update(theta, grads, est, config.delta, metric, include_divergence=False, **cg)
        elif algo in ("fPCPO", "dPCPO"):
            res = space_update(theta, grads, est, config.delta, metric, include_divergence=False,
                               g=grads.g - state.lam * grads.a, **cg)
        else:
            res = cpo_update(theta, grads.g - state.lam * grads.a, LinearConstraint(grads.c, est.d_k),
                             grads.fisher, config.delta, **cg)
    except Exception as exc:
        raise RuntimeError(f"{algo} iteration {state.iteration} failed: {exc}") from exc

    hd = update_h_d(state.hd, est, config.h_c) if algo == "SPACE" else state.hd
    lam = update_lambda(state.lam, config.beta) if algo in ("dCPO", "dPCPO") else state.lam
    record = IterationRecord(
        iter=state.iteration, J_R=est.J_R, J_C=est.J_C, J_D=est.J_D, h_D=state.hd.h_d, lam=state.lam,
        active={"div": bool(res.active.get("div")), "cost": bool(res.active.get("cost")),
                "recovery": bool(res.recovery)},
        wall_time=time.perf_counter() - t0,
    )
    new_state = TrainState(policy.with_theta(res.theta_new), hd, lam, state.iteration + 1)
    return new_state, record


def train(config: AlgoConfig, env: CMDPEnv, baseline_policy=None, state: TrainState | None = None,
          on_iteration: Callable | None = None):
    """Run until ``config.n_iters`` updates have been made in total.

    Passing a ``state`` restored from a checkpoint resumes the run; the
    per-iteration rollout seeds depend only on ``(config.seed, iteration)``.
    Returns ``(records, final_state)``.
    """
    state = state or initial_state(config, env)
    records = []
    while state.iteration < config.n_iters:
        state, rec = train_iteration(state, env, baseline_policy, config)
        records.append(rec)
        if on_iteration is not None:
            on_iteration(state, rec)
    return records, state


def with_overrides(config: AlgoConfig, **kwargs) -> AlgoConfig:
    return replace(config, **kwargs)
