"""Per-iteration constrained subproblems in parameter-step coordinates.

Every problem here is posed over the step ``x = theta - theta_k``:

* trust-region LP:  max g.x  s.t.  x'Fx/2 <= delta
* metric projection: min (x - p)'L(x - p)/2  s.t.  n.x + o <= 0
* trust-region QP:  max g.x  s.t.  x'Fx/2 <= delta,  n.x + o <= 0

The closed forms use conjugate gradient on an operator. ``oracle_qp`` solves
the same problems from a dense matrix by active-set enumeration and is the
reference the closed forms are checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InfeasibleConstraintError, InfeasibleProblem, NumericalError, UsageError

TINY = 1e-12
CG_ITERS = 20
CG_TOL = 1e-10


def as_operator(matrix) -> Callable:
    if callable(matrix):
        return matrix
    m = np.asarray(matrix, dtype=float)
    return lambda v: m @ v


def conjugate_gradient(apply_A, b, max_iters=CG_ITERS, tol=CG_TOL, return_residual=False):
    """Solve ``A x = b`` for symmetric positive-definite ``A`` given as a matvec.

    Stops once ``||Ax - b|| <= tol * ||b||`` or after ``max_iters`` steps; the
    iterate is returned either way.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    apply_A = as_operator(apply_A)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalError("conjugate_gradient: non-finite right-hand side")
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    target = (tol * math.sqrt(rr)) ** 2
    for _ in range(max_iters):
        if rr <= target or rr == 0.0:
            break
        ap = apply_A(p)
        pap = p @ ap
        if not np.isfinite(pap):
            raise NumericalError("conjugate_gradient: non-finite operator output")
        if pap <= 0:
            raise NumericalError(f"conjugate_gradient: operator not positive definite (p'Ap = {pap:.3e})")
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.all(np.isfinite(x)):
        raise NumericalError("conjugate_gradient: non-finite iterate")
    if return_residual:
        bn = np.linalg.norm(b)
        return x, (math.sqrt(rr) / bn if bn > 0 else 0.0)
    return x


@dataclass(frozen=True, eq=False)
class Metric:
    """Projection metric: ``L = F`` for ``KL`` or the identity for ``TwoNorm``."""

    kind: str
    fisher: Callable | None = None
    cg_iters: int = CG_ITERS
    cg_tol: float = CG_TOL

    def __post_init__(self):
        if self.kind not in ("KL", "TwoNorm"):
            raise UsageError(f"unknown metric {self.kind!r}")
        if self.kind == "KL" and self.fisher is None:
            raise UsageError("KL metric needs a Fisher operator")
        if self.fisher is not None:
            object.__setattr__(self, "fisher", as_operator(self.fisher))

    def apply(self, v):
        return self.fisher(v) if self.kind == "KL" else np.asarray(v, dtype=float)

    def solve(self, v):
        if self.kind == "TwoNorm":
            return np.asarray(v, dtype=float)
        return conjugate_gradient(self.fisher, v, self.cg_iters, self.cg_tol)


@dataclass(frozen=True)
class LinearConstraint:
    """``normal . x + offset <= 0``."""

    normal: np.ndarray
    offset: float


@dataclass
class UpdateResult:
    theta_new: np.ndarray
    step_reward: np.ndarray
    lambda_div: float = 0.0
    lambda_cost: float = 0.0
    active: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    recovery: bool = False


def _reward_step(g, fisher, delta, cg_iters=CG_ITERS, cg_tol=CG_TOL):
    if delta <= 0:
        raise UsageError("delta must be positive")
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        return np.zeros_like(g), 0.0, np.zeros_like(g), 0.0
    finv_g = conjugate_gradient(fisher, g, cg_iters, cg_tol)
    q = float(g @ finv_g)
    if q <= TINY:
        return np.zeros_like(g), 0.0, finv_g, q
    u = math.sqrt(2.0 * delta / q)
    return u * finv_g, u, finv_g, q


def reward_step(g, fisher, delta, cg_iters=CG_ITERS, cg_tol=CG_TOL):
    """Natural-gradient step to the trust-region boundary.

    Returns ``(direction, u)`` with ``direction = u F^-1 g`` and
    ``u = sqrt(2 delta / g'F^-1 g)``; a zero direction and ``u = 0`` when
    ``g'F^-1 g`` vanishes.
    """
    step, u, _, _ = _reward_step(g, as_operator(fisher), delta, cg_iters, cg_tol)
    return step, u


def project(step, constraint: LinearConstraint, metric: Metric, l_inv_normal=None):
    """Metric projection of ``step`` onto the half-space of ``constraint``.

    Returns ``(correction, lam)``; the projected step is ``step - correction``
    with ``correction = lam * L^-1 normal`` and ``lam`` clamped at zero.
    """
    step = np.asarray(step, dtype=float)
    n = np.asarray(constraint.normal, dtype=float)
    violation = float(n @ step + constraint.offset)
    if np.linalg.norm(n) <= TINY:
        if violation > 0:
            raise InfeasibleConstraintError(
                f"constraint violated by {violation:.3e} but its normal vanishes")
        return np.zeros_like(step), 0.0
    if violation <= 0:
        return np.zeros_like(step), 0.0
    y = metric.solve(n) if l_inv_normal is None else l_inv_normal
    denom = float(n @ y)
    if denom <= TINY:
        raise NumericalError(f"degenerate projection denominator {denom:.3e}")
    lam = violation / denom
    return lam * y, lam


def space_update(theta_k, gradients, estimates, delta, metric: Metric, include_divergence=True,
                 chain_projections=False, g=None, cg_iters=CG_ITERS, cg_tol=CG_TOL) -> UpdateResult:
    """Reward step followed by the divergence and cost projections.

    By default both corrections are measured from the post-reward-step point
    and subtracted together. ``chain_projections=True`` instead projects the
    divergence-corrected point onto the cost set. ``include_divergence=False``
    gives the PCPO update; ``g`` overrides the reward gradient (f-/d-PCPO).
    """
    theta_k = np.asarray(theta_k, dtype=float)
    g = gradients.g if g is None else np.asarray(g, dtype=float)
    if g.shape != theta_k.shape or gradients.c.shape != theta_k.shape:
        raise UsageError("gradient and parameter lengths differ")
    fisher = as_operator(gradients.fisher)
    step, u, finv_g, q = _reward_step(g, fisher, delta, cg_iters, cg_tol)

    corr_div, lam_div = np.zeros_like(step), 0.0
    if include_divergence:
        corr_div, lam_div = project(step, LinearConstraint(gradients.a, estimates.b_k), metric)
    base = step - corr_div if chain_projections else step
    corr_cost, lam_cost = project(base, LinearConstraint(gradients.c, estimates.d_k), metric)
    total = step - corr_div - corr_cost

    diagnostics = {
        "u": u,
        "gFg": q,
        "trust_region": 0.5 * float(step @ fisher(step)),
        "pred_div": float(gradients.a @ total + estimates.b_k) if include_divergence else None,
        "pred_cost": float(gradients.c @ total + estimates.d_k),
    }
    return UpdateResult(theta_k + total, step, lam_div, lam_cost,
                        {"div": lam_div > 0, "cost": lam_cost > 0}, diagnostics)


def cpo_update(theta_k, g_eff, cost_constraint: LinearConstraint, fisher, delta,
               cg_iters=CG_ITERS, cg_tol=CG_TOL) -> UpdateResult:
    """Trust-region QP with one linear cost constraint, solved through its two-multiplier dual.

    When no step inside the trust region satisfies the linearised cost, the
    returned step is the pure cost-reduction step on the trust-region
    boundary and ``recovery`` is set.
    """
    if delta <= 0:
        raise UsageError("delta must be positive")
    theta_k = np.asarray(theta_k, dtype=float)
    g = np.asarray(g_eff, dtype=float)
    c = np.asarray(cost_constraint.normal, dtype=float)
    d = float(cost_constraint.offset)
    fisher = as_operator(fisher)

    finv_g = conjugate_gradient(fisher, g, cg_iters, cg_tol) if np.any(g) else np.zeros_like(g)
    q = float(g @ finv_g)

    def result(step, nu, lam, recovery=False):
        diag = {"tr_multiplier": lam, "trust_region": 0.5 * float(step @ fisher(step)),
                "pred_cost": float(c @ step + d)}
        return UpdateResult(theta_k + step, step, 0.0, nu, {"div": False, "cost": nu > 0}, diag, recovery)

    if np.linalg.norm(c) <= TINY:
        if d > 0:
            raise InfeasibleConstraintError(f"cost constraint violated by {d:.3e} but its normal vanishes")
        if q <= TINY:
            return result(np.zeros_like(g), 0.0, 0.0)
        return result(math.sqrt(2 * delta / q) * finv_g, 0.0, math.sqrt(q / (2 * delta)))

    finv_c = conjugate_gradient(fisher, c, cg_iters, cg_tol)
    s = float(c @ finv_c)
    r = float(g @ finv_c)

    if q > TINY:
        lam = math.sqrt(q / (2 * delta))
        step = finv_g / lam
        if c @ step + d <= 0:
            return result(step, 0.0, lam)
    elif d <= 0:
        return result(np.zeros_like(g), 0.0, 0.0)

    if d - math.sqrt(2 * delta * s) > 0:
        step = -math.sqrt(2 * delta / s) * finv_c
        return result(step, 0.0, 0.0, recovery=True)

    a_coef = q - r * r / s
    b_coef = 2 * delta - d * d / s
    if a_coef <= TINY or b_coef <= TINY:
        # only the point of the constraint plane nearest theta_k in the F-metric remains optimal
        step = -(d / s) * finv_c
        return result(step, max(r / s, 0.0), 0.0)
    lam = math.sqrt(a_coef / b_coef)
    nu = (r + lam * d) / s
    if nu < 0:
        raise NumericalError(f"cpo_update: negative cost multiplier {nu:.3e}")
    step = (finv_g - nu * finv_c) / lam
    return result(step, nu, lam)


# --------------------------------------------------------------------------
# Dense reference problems, oracle and KKT checks

@dataclass(frozen=True, eq=False)
class TrustRegionLP:
    g: np.ndarray
    F: np.ndarray
    delta: float


@dataclass(frozen=True, eq=False)
class ProjectionQP:
    point: np.ndarray
    normal: np.ndarray
    offset: float
    L: np.ndarray


@dataclass(frozen=True, eq=False)
class TrustRegionQP:
    g: np.ndarray
    F: np.ndarray
    delta: float
    normal: np.ndarray
    offset: float


@dataclass
class OracleSolution:
    x: np.ndarray
    multipliers: dict
    active: tuple
    objective: float


def _whiten(F):
    evals, evecs = np.linalg.eigh(np.asarray(F, dtype=float))
    if evals.min() <= 0:
        raise UsageError("oracle needs a positive-definite matrix")
    # x = W y maps the ellipsoid x'Fx <= 2 delta to the ball ||y||^2 <= 2 delta
    w = evecs / np.sqrt(evals)
    return w


def _tr_candidates(g, F, delta):
    w = _whiten(F)
    gy = w.T @ g
    norm = np.linalg.norm(gy)
    if norm <= TINY:
        return [(np.zeros_like(g), (), {"trust_region": 0.0})]
    radius = math.sqrt(2 * delta)
    out = []
    for sign in (1.0, -1.0):
        y = sign * radius * gy / norm
        out.append((w @ y, ("trust_region",), {"trust_region": sign * norm / radius}))
    return out


def _tr_plane_candidates(g, F, delta, n, o):
    """Stationary points with both the ellipsoid and the plane active."""
    w = _whiten(F)
    gy, ny = w.T @ g, w.T @ n
    nn = ny @ ny
    if nn <= TINY:
        return []
    y0 = -o * ny / nn
    rem = 2 * delta - y0 @ y0
    if rem < 0:
        return []
    pg = gy - (gy @ ny) / nn * ny
    pnorm = np.linalg.norm(pg)
    if pnorm <= TINY:
        return [(w @ y0, ("trust_region", "linear"), {})]
    out = []
    for sign in (1.0, -1.0):
        y = y0 + sign * math.sqrt(rem) * pg / pnorm
        # multipliers from g = lam F x + nu n, i.e. gy = lam y + nu ny
        basis = np.column_stack([y, ny])
        lam, nu = np.linalg.lstsq(basis, gy, rcond=None)[0]
        out.append((w @ y, ("trust_region", "linear"), {"trust_region": float(lam), "linear": float(nu)}))
    return out


def oracle_qp(problem) -> OracleSolution:
    """Dense active-set enumeration over at most two inequality constraints.

    Each active set is solved exactly (eigendecomposition for the ellipsoid,
    a bordered linear system for the plane); the feasible candidate with the
    best objective wins. Raises :class:`InfeasibleProblem` if none is feasible.
    """
    feas_tol = 1e-9
    if isinstance(problem, ProjectionQP):
        p, n, o, L = (np.asarray(problem.point, float), np.asarray(problem.normal, float),
                      float(problem.offset), np.asarray(problem.L, float))
        k = p.size
        if k > 16:
            raise UsageError("oracle_qp is limited to n <= 16")
        cands = [(p.copy(), (), {"linear": 0.0})]
        if np.linalg.norm(n) > TINY:
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = L
            kkt[:k, k] = n
            kkt[k, :k] = n
            sol = np.linalg.solve(kkt, np.concatenate([L @ p, [-o]]))
            cands.append((sol[:k], ("linear",), {"linear": float(sol[k])}))
        best = None
        for x, act, mult in cands:
            if n @ x + o > feas_tol * max(1.0, abs(o)) or mult.get("linear", 0.0) < -feas_tol:
                continue
            obj = -0.5 * (x - p) @ L @ (x - p)
            if best is None or obj > best.objective:
                best = OracleSolution(x, mult, act, obj)
        if best is None:
            raise InfeasibleProblem("projection has no feasible point", float(o))
        return best

    g, F, delta = np.asarray(problem.g, float), np.asarray(problem.F, float), float(problem.delta)
    if g.size > 16:
        raise UsageError("oracle_qp is limited to n <= 16")
    if isinstance(problem, TrustRegionLP):
        cands = _tr_candidates(g, F, delta)
        n, o = np.zeros_like(g), -1.0
    elif isinstance(problem, TrustRegionQP):
        n, o = np.asarray(problem.normal, float), float(problem.offset)
        cands = _tr_candidates(g, F, delta) + _tr_plane_candidates(g, F, delta, n, o)
    else:
        raise UsageError(f"unsupported problem type {type(problem).__name__}")
    best = None
    for x, act, mult in cands:
        if 0.5 * x @ F @ x - delta > feas_tol * delta:
            continue
        if n @ x + o > feas_tol * max(1.0, abs(o)):
            continue
        if any(v < -feas_tol for v in mult.values()):
            continue
        obj = float(g @ x)
        if best is None or obj > best.objective + 1e-15:
            best = OracleSolution(x, mult, act, obj)
    if best is None:
        w = _whiten(F)
        min_violation = o - math.sqrt(2 * delta) * np.linalg.norm(w.T @ n)
        raise InfeasibleProblem("no point of the trust region satisfies the linear constraint", float(min_violation))
    return best


@dataclass
class KKTReport:
    residuals: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.residuals.values())

    @property
    def worst(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0


def check_kkt(problem, x, multipliers: dict, tol=1e-8) -> KKTReport:
    """Scaled stationarity, feasibility, dual-sign and complementary-slackness residuals.

    ``multipliers`` uses the keys ``trust_region`` and ``linear``; missing keys
    count as zero.
    """
    x = np.asarray(x, dtype=float)
    lam_tr = float(multipliers.get("trust_region", 0.0))
    lam_lin = float(multipliers.get("linear", 0.0))
    res = {}
    if isinstance(problem, ProjectionQP):
        L, p, n, o = problem.L, problem.point, problem.normal, problem.offset
        scale = max(1.0, np.linalg.norm(L @ p), abs(lam_lin) * np.linalg.norm(n))
        res["stationarity"] = float(np.linalg.norm(L @ (x - p) + lam_lin * n)) / scale
        lin = float(n @ x + o)
        lin_scale = max(1.0, abs(o), np.linalg.norm(n) * np.linalg.norm(x))
        res["primal_linear"] = max(0.0, lin) / lin_scale
        res["dual"] = max(0.0, -lam_lin)
        res["complementarity"] = abs(lam_lin * lin) / (lin_scale * max(1.0, abs(lam_lin)))
        return KKTReport(res, tol)

    g, F, delta = problem.g, problem.F, problem.delta
    if isinstance(problem, TrustRegionQP):
        n, o = problem.normal, problem.offset
    else:
        n, o = np.zeros_like(g), -1.0
    fx = F @ x
    scale = max(1.0, np.linalg.norm(g))
    res["stationarity"] = float(np.linalg.norm(g - lam_tr * fx - lam_lin * n)) / scale
    tr = 0.5 * float(x @ fx) - delta
    res["primal_trust_region"] = max(0.0, tr) / delta
    res["dual"] = max(0.0, -lam_tr, -lam_lin)
    res["complementarity_trust_region"] = abs(lam_tr * tr) / (delta * max(1.0, abs(lam_tr)))
    if isinstance(problem, TrustRegionQP):
        lin = float(n @ x + o)
        lin_scale = max(1.0, abs(o), np.linalg.norm(n) * np.linalg.norm(x))
        res["primal_linear"] = max(0.0, lin) / lin_scale
        res["complementarity_linear"] = abs(lam_lin * lin) / (lin_scale * max(1.0, abs(lam_lin)))
    return KKTReport(res, tol)


def contraction_gap(point, projected, L, feasible_points) -> float:
    """Largest ``(point - projected)' L (x' - projected)`` over the feasible points; <= 0 for a true projection."""
    diff = np.asarray(point) - np.asarray(projected)
    lhs = np.asarray(L) @ diff
    return float(np.max((np.asarray(feasible_points) - projected) @ lhs))


def sample_halfspace(rng, normal, offset, n_points, scale=1.0):
    """Random points ``x`` with ``normal . x + offset <= 0``."""
    normal = np.asarray(normal, dtype=float)
    x = rng.normal(scale=scale, size=(n_points, normal.size))
    viol = x @ normal + offset
    nn = normal @ normal
    shift = np.maximum(viol, 0.0) / nn + rng.uniform(0, 1, n_points) * scale / math.sqrt(nn)
    return x - shift[:, None] * normal

