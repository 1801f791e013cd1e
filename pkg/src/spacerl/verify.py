"""Property suite behind the ``verify`` command.

Each check returns a dict with at least ``passed``, ``value`` and ``tol``.
The projection routine is injectable so that a deliberately broken variant
can be shown to fail.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .envs import Batch, Trajectory
from .errors import InfeasibleProblem
from .estimation import gae_advantages
from .policy import FisherOperator, GaussianPolicy, grad_surrogate, kl_grad, kl_states, surrogate
from .subproblem import (LinearConstraint, Metric, ProjectionQP, TrustRegionLP, TrustRegionQP, check_kkt,
                         contraction_gap, cpo_update, oracle_qp, project, reward_step, sample_halfspace,
                         space_update)


def random_spd(rng, n, low=0.1, high=10.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    evals = np.exp(rng.uniform(math.log(low), math.log(high), n))
    return (q * evals) @ q.T


class _Grads:
    def __init__(self, g, a, c, F):
        self.g, self.a, self.c, self.fisher = g, a, c, F


class _Est:
    def __init__(self, b_k, d_k):
        self.b_k, self.d_k = b_k, d_k


def random_instance(rng, max_n=8):
    """Random subproblem data; slacks are scaled to the reach of the trust region so clamps vary."""
    n = int(rng.integers(2, max_n + 1))
    F = random_spd(rng, n)
    g, a, c = rng.normal(size=(3, n))
    delta = float(10 ** rng.uniform(-4, 0))
    reach_a = math.sqrt(2 * delta * a @ np.linalg.solve(F, a))
    reach_c = math.sqrt(2 * delta * c @ np.linalg.solve(F, c))
    b = float(rng.uniform(-1.5, 1.5) * reach_a)
    d = float(rng.uniform(-1.5, 1.5) * reach_c)
    return dict(n=n, F=F, g=g, a=a, c=c, b=b, d=d, delta=delta, theta=rng.normal(size=n))


def _oracle_sequential(inst, L):
    tr = oracle_qp(TrustRegionLP(inst["g"], inst["F"], inst["delta"]))
    pa = oracle_qp(ProjectionQP(tr.x, inst["a"], inst["b"], L))
    pc = oracle_qp(ProjectionQP(tr.x, inst["c"], inst["d"], L))
    return tr, pa, pc, pa.x + pc.x - tr.x


def check_closed_forms(n_instances=1000, seed=0, max_n=8, tol=1e-6, kkt_tol=1e-8, project_fn=project):
    """Closed forms against the oracle, plus KKT residuals of every returned solution."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    dev = {"reward_step": 0.0, "project_KL": 0.0, "project_TwoNorm": 0.0,
           "space_KL": 0.0, "space_TwoNorm": 0.0, "cpo": 0.0, "cpo_objective_gap": 0.0}
    worst_kkt = 0.0
    kkt_failures = []
    counts = {"cpo_feasible": 0, "cpo_recovery": 0, "recovery_mismatch": 0, "active_div": 0, "active_cost": 0}

    def kkt(problem, x, mult, label):
        nonlocal worst_kkt
        rep = check_kkt(problem, x, mult, kkt_tol)
        worst_kkt = max(worst_kkt, rep.worst)
        if not rep.passed:
            kkt_failures.append((label, rep.residuals))

    for _ in range(n_instances):
        inst = random_instance(rng, max_n)
        F, g, delta = inst["F"], inst["g"], inst["delta"]
        n = inst["n"]

        step, u = reward_step(g, F, delta)
        tr = oracle_qp(TrustRegionLP(g, F, delta))
        dev["reward_step"] = max(dev["reward_step"], np.max(np.abs(step - tr.x)))
        kkt(TrustRegionLP(g, F, delta), step, {"trust_region": 1.0 / u if u else 0.0}, "reward_step")

        for kind, L in (("KL", F), ("TwoNorm", np.eye(n))):
            metric = Metric(kind, F if kind == "KL" else None)
            for normal, offset in ((inst["a"], inst["b"]), (inst["c"], inst["d"])):
                corr, lam = project_fn(step, LinearConstraint(normal, offset), metric)
                ref = oracle_qp(ProjectionQP(step, normal, offset, L))
                dev[f"project_{kind}"] = max(dev[f"project_{kind}"], np.max(np.abs(step - corr - ref.x)))
                kkt(ProjectionQP(step, normal, offset, L), step - corr, {"linear": lam}, f"project_{kind}")

            res = space_update(inst["theta"], _Grads(g, inst["a"], inst["c"], F), _Est(inst["b"], inst["d"]),
                               delta, metric)
            _, pa, pc, expected = _oracle_sequential(inst, L)
            dev[f"space_{kind}"] = max(dev[f"space_{kind}"], np.max(np.abs(res.theta_new - inst["theta"] - expected)))
            counts["active_div"] += res.active["div"]
            counts["active_cost"] += res.active["cost"]

        res = cpo_update(inst["theta"], g, LinearConstraint(inst["c"], inst["d"]), F, delta)
        qp = TrustRegionQP(g, F, delta, inst["c"], inst["d"])
        try:
            ref = oracle_qp(qp)
        except InfeasibleProblem:
            counts["cpo_recovery"] += 1
            counts["recovery_mismatch"] += not res.recovery
            continue
        counts["cpo_feasible"] += 1
        counts["recovery_mismatch"] += res.recovery
        x = res.theta_new - inst["theta"]
        dev["cpo"] = max(dev["cpo"], np.max(np.abs(x - ref.x)))
        dev["cpo_objective_gap"] = max(dev["cpo_objective_gap"], abs(float(g @ x) - ref.objective))
        kkt(qp, x, {"trust_region": res.diagnostics["tr_multiplier"], "linear": res.lambda_cost}, "cpo")

    elapsed = time.perf_counter() - t0
    max_dev = max(dev.values())
    return {
        "passed": bool(max_dev <= tol) and counts["recovery_mismatch"] == 0,
        "value": max_dev, "tol": tol, "deviations": dev, "counts": counts, "seconds": elapsed,
        "kkt": {"passed": not kkt_failures, "value": worst_kkt, "tol": kkt_tol,
                "failures": kkt_failures[:5], "n_failures": len(kkt_failures)},
    }


def check_contraction(n_instances=200, n_points=100, seed=1, max_n=8, tol=1e-8, project_fn=project):
    """(p - x*)' L (x' - x*) <= tol for projected x* and random feasible x'."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    moved = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, max_n + 1))
        F = random_spd(rng, n)
        normal = rng.normal(size=n)
        offset = float(rng.normal())
        point = rng.normal(size=n)
        feasible = sample_halfspace(rng, normal, offset, n_points)
        for kind, L in (("KL", F), ("TwoNorm", np.eye(n))):
            metric = Metric(kind, F if kind == "KL" else None)
            corr, _ = project_fn(point, LinearConstraint(normal, offset), metric)
            moved += bool(np.any(corr))
            worst = max(worst, contraction_gap(point, point - corr, L, feasible))
    return {"passed": bool(worst <= tol), "value": worst, "tol": tol, "projected_instances": moved}


def _random_policy(rng, arch, state_dim=4, action_dim=2, hidden=3):
    base = GaussianPolicy.create(state_dim, action_dim, arch, hidden, rng=rng)
    return base.with_theta(rng.normal(scale=0.5, size=base.n_params))


def _random_batch(rng, state_dim, action_dim, lengths):
    return Batch(tuple(
        Trajectory(rng.normal(size=(n, state_dim)), rng.normal(size=(n, action_dim)),
                   rng.normal(size=n), rng.uniform(0, 1, n))
        for n in lengths))


def _central_diff(fun, theta, eps):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        grad[i] = (fun(theta + e) - fun(theta - e)) / (2 * eps)
    return grad


def _rel(x, y):
    return float(np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300))


def dense_fisher_fd(policy: GaussianPolicy, states, eps=1e-6):
    """Fisher assembled from finite-difference mean Jacobians; independent of the JVP/VJP code."""
    n, a = policy.n_params, policy.action_dim
    theta = policy.theta
    jac = np.zeros((len(states), a, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        jac[:, :, i] = (policy.with_theta(theta + e).mean(states) - policy.with_theta(theta - e).mean(states)) / (2 * eps)
    inv_var = np.exp(-2 * policy.log_std)
    F = np.einsum("kai,a,kaj->ij", jac, inv_var, jac) / len(states)
    F[-a:, -a:] += 2.0 * np.eye(a)
    return F


def check_gradients(seed=2, fd_step=1e-5, tol_grad=1e-4, tol_fvp=1e-6):
    rng = np.random.default_rng(seed)
    grad_err = kl_err = fvp_err = 0.0
    for arch in ("linear", "mlp"):
        pol = _random_policy(rng, arch)
        batch = _random_batch(rng, 4, 2, [7, 5])
        adv = rng.normal(size=batch.n_steps)
        theta = pol.theta.copy()
        g = grad_surrogate(pol, batch, adv, theta)
        fd = _central_diff(lambda t: surrogate(pol.with_theta(t), batch.states, batch.actions, adv, theta),
                           theta, fd_step)
        grad_err = max(grad_err, _rel(g, fd))

        other = _random_policy(rng, arch)
        kg = kl_grad(pol, other, batch.states)
        fd = _central_diff(lambda t: float(np.sum(kl_states(pol.with_theta(t), other, batch.states))), theta, fd_step)
        kl_err = max(kl_err, _rel(kg, fd))

        op = FisherOperator(batch.states, pol, damping=0.0)
        F = dense_fisher_fd(pol, batch.states)
        for _ in range(5):
            v = rng.normal(size=pol.n_params)
            fvp_err = max(fvp_err, _rel(op(v), F @ v))
    return {
        "passed": bool(grad_err <= tol_grad and kl_err <= tol_grad and fvp_err <= tol_fvp),
        "value": max(grad_err, kl_err), "tol": tol_grad,
        "grad_surrogate_rel": grad_err, "kl_grad_rel": kl_err, "fvp_rel": fvp_err, "fvp_tol": tol_fvp,
    }


def check_gae(seed=3, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        lengths = rng.integers(1, 12, size=rng.integers(1, 5))
        batch = _random_batch(rng, 3, 1, lengths)
        r = batch.rewards
        v = rng.normal(size=batch.n_steps)
        gamma = float(rng.uniform(0.5, 1.0))
        td = []
        for piece_r, piece_v in zip(batch.split(r), batch.split(v)):
            nxt = np.append(piece_v[1:], 0.0)
            td.append(piece_r + gamma * nxt - piece_v)
        worst = max(worst, np.max(np.abs(gae_advantages(batch, r, v, gamma, 0.0) - np.concatenate(td))))
        rtg = []
        for piece in batch.split(r):
            rtg.extend(sum(gamma ** (j - i) * piece[j] for j in range(i, len(piece))) for i in range(len(piece)))
        worst = max(worst, np.max(np.abs(gae_advantages(batch, r, np.zeros_like(r), gamma, 1.0) - np.array(rtg))))
    return {"passed": bool(worst <= tol), "value": worst, "tol": tol}


def run_all(n_instances=1000, seed=0, project_fn=project) -> dict:
    closed = check_closed_forms(n_instances, seed, project_fn=project_fn)
    kkt = closed.pop("kkt")
    results = {
        "oracle_agreement": closed,
        "kkt_residuals": kkt,
        "contraction": check_contraction(seed=seed + 1, project_fn=project_fn),
        "gradients": check_gradients(seed=seed + 2),
        "gae_identities": check_gae(seed=seed + 3),
    }
    return {"passed": all(r["passed"] for r in results.values()), "checks": results}
