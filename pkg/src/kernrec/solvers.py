"""Minimum-norm and regularized solvers over assembled recovery problems.

Three deterministic optimizers share the representer parametrization
u = sum_i lambda_i psi_i with objective lambda' K lambda:

* equality constraints -> sequential quadratic programming on the KKT system,
* squared-residual regularization -> Levenberg-Marquardt,
* inequality (tolerance) constraints -> exterior squared-hinge penalty
  homotopy with Gauss-Newton inner solves.

All report first-order optimality certificates via ``kkt_residual``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import ConditioningError, InputError
from .kernels import RkhsFunction
from .problem import (
    EQUALITY,
    RELAXED,
    RecoveryProblem,
    residual_and_jacobian,
    residual_vector,
)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    tol_constraint: float = 1e-8
    tol_stationarity: float = 1e-6
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    linesearch_shrink: float = 0.5
    mu: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if not (self.tol_constraint > 0 and self.tol_stationarity > 0):
            raise InputError("tolerances must be positive")
        if not self.penalty_init > 0:
            raise InputError("penalty_init must be positive")
        if not self.penalty_growth > 1:
            raise InputError("penalty_growth must exceed 1")
        if not 0 < self.linesearch_shrink < 1:
            raise InputError("linesearch_shrink must lie in (0, 1)")
        if not self.mu > 0:
            raise InputError("mu must be positive")


@dataclass
class SolveReport:
    converged: bool
    iters: int
    final_constraint_violation: float
    final_stationarity: float
    objective: float
    history: list = field(default_factory=list)


@dataclass
class RecoverySolution:
    fn: RkhsFunction
    report: SolveReport
    multipliers: np.ndarray


def _objective(problem: RecoveryProblem, lam: np.ndarray) -> float:
    return float(lam @ problem.gram.entries @ lam)


def _norm_from_objective(obj: float) -> float:
    return math.sqrt(max(obj, 0.0))


def _violation(problem: RecoveryProblem, r: np.ndarray) -> float:
    excess = np.abs(r) - problem.tolerances
    return float(np.max(np.maximum(excess, 0.0))) if r.size else 0.0


def _solution(problem, lam, report, nu) -> RecoverySolution:
    fn = RkhsFunction(basis=problem.basis, coeffs=lam, kernel=problem.kernel)
    return RecoverySolution(fn=fn, report=report, multipliers=np.asarray(nu))


def solve_min_norm_equality(problem: RecoveryProblem, cfg: SolverConfig) -> RecoverySolution:
    """SQP for min lambda'K lambda subject to r(lambda) = 0.

    Each iterate solves the KKT system of the local equality-constrained QP
    and damps the step against the merit lambda'K lambda + penalty*||r||_2.
    """
    if problem.kind != EQUALITY:
        raise InputError("solve_min_norm_equality requires an equality problem")
    K = problem.gram.entries
    n = K.shape[0]
    reg = problem.gram.nugget
    lam = np.zeros(n)
    nu = np.zeros(len(problem.constraints))
    penalty = cfg.penalty_init
    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        r, J = residual_and_jacobian(problem, lam)
        m = r.shape[0]
        A = np.zeros((n + m, n + m))
        A[:n, :n] = 2.0 * (K + reg * np.eye(n))
        A[:n, n:] = -J.T
        A[n:, :n] = J
        rhs = np.concatenate([-2.0 * K @ lam, -r])
        # least squares tolerates the (near-)singular Gram blocks that dense
        # kernel bases produce at fine point spacings
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise ConditioningError("KKT system produced non-finite step")
        d, nu = sol[:n], sol[n:]
        stat = float(np.linalg.norm(2.0 * K @ lam - J.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
        viol = float(np.max(np.abs(r))) if m else 0.0
        history.append((_norm_from_objective(_objective(problem, lam)), viol))
        if viol <= cfg.tol_constraint and stat <= cfg.tol_stationarity:
            converged = True
            break
        penalty = max(penalty, 2.0 * float(np.max(np.abs(nu))) if m else penalty)
        merit0 = _objective(problem, lam) + penalty * float(np.linalg.norm(r))
        t = 1.0
        while t > 1e-12:
            trial = lam + t * d
            rt = residual_vector(problem, trial)
            merit = _objective(problem, trial) + penalty * float(np.linalg.norm(rt))
            if merit <= merit0 - 1e-12 * t or t <= 1e-10:
                break
            t *= cfg.linesearch_shrink
        lam = lam + t * d
    if not converged and len(problem.constraints):
        # a null-space refinement step recovers certified stationarity when
        # the saddle system is too ill-conditioned for the SQP step to finish
        m = len(problem.constraints)
        plam, pnu, pstat, pviol, ok = _equality_newton(
            problem, K, lam, np.arange(m), np.zeros(m), cfg)
        if ok:
            lam, nu, converged = plam, pnu, True
    r, J = residual_and_jacobian(problem, lam)
    viol = float(np.max(np.abs(r))) if r.size else 0.0
    stat = float(np.linalg.norm(2.0 * K @ lam - J.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
    obj = _norm_from_objective(_objective(problem, lam))
    report = SolveReport(
        converged=converged and viol <= cfg.tol_constraint and stat <= cfg.tol_stationarity,
        iters=it, final_constraint_violation=viol, final_stationarity=stat,
        objective=obj, history=history,
    )
    return _solution(problem, lam, report, nu)


def _chol_factor(problem: RecoveryProblem) -> np.ndarray:
    """Upper-triangular R with R'R = K + nugget*I."""
    L = problem.gram.factorization[0]
    return np.tril(L).T


def solve_regularized(problem: RecoveryProblem, cfg: SolverConfig) -> RecoverySolution:
    """Regularized recovery min ||r(lambda)||^2 + (1/mu) lambda'K lambda.

    Solved through its optimality system in primal-dual form,

        2 K lambda - J' nu = 0,      r(lambda) + nu / (2 mu) = 0,

    by damped Newton iteration.  This system stays well-scaled for any mu (no
    residual is multiplied by mu) and reduces to the equality-constrained KKT
    system as mu grows, so the iterates track the central path toward the
    minimum-norm solution.  The line search monitors the optimality-system
    residual.  This is an unconstrained fit, so the report's constraint-
    violation field is zero by definition; measurement residual magnitudes
    are visible in the history.
    """
    K = problem.gram.entries
    n = K.shape[0]
    m = len(problem.constraints)
    reg = problem.gram.nugget
    lam = np.zeros(n)
    nu = np.zeros(m)
    history = []
    total_iters = 0
    stat = np.inf

    def kkt_vec(l, v):
        r, J = residual_and_jacobian(problem, l)
        return np.concatenate([2.0 * K @ l - J.T @ v, r + v / (2.0 * cfg.mu)]), r, J

    F, r, J = kkt_vec(lam, nu)
    for total_iters in range(1, cfg.max_iters + 1):
        stat = float(np.linalg.norm(F[:n])) / (1.0 + float(np.linalg.norm(lam)))
        history.append((_norm_from_objective(_objective(problem, lam)),
                        float(np.max(np.abs(r))) if m else 0.0))
        if stat <= cfg.tol_stationarity and float(np.max(np.abs(F[n:]), initial=0.0)) <= cfg.tol_constraint:
            break
        A = np.zeros((n + m, n + m))
        A[:n, :n] = 2.0 * (K + reg * np.eye(n))
        A[:n, n:] = -J.T
        A[n:, :n] = J
        A[n:, n:] = np.eye(m) / (2.0 * cfg.mu)
        step, *_ = np.linalg.lstsq(A, -F, rcond=None)
        if not np.all(np.isfinite(step)):
            raise ConditioningError("regularized solver produced a non-finite step")
        base = float(np.linalg.norm(F))
        t = 1.0
        while t > 1e-12:
            Ft, rt, Jt = kkt_vec(lam + t * step[:n], nu + t * step[n:])
            if float(np.linalg.norm(Ft)) <= (1.0 - 1e-4 * t) * base or t <= 1e-10:
                break
            t *= cfg.linesearch_shrink
        lam = lam + t * step[:n]
        nu = nu + t * step[n:]
        F, r, J = Ft, rt, Jt
        stat = float(np.linalg.norm(F[:n])) / (1.0 + float(np.linalg.norm(lam)))
    obj = _norm_from_objective(_objective(problem, lam))
    report = SolveReport(
        converged=stat <= cfg.tol_stationarity, iters=total_iters,
        final_constraint_violation=0.0, final_stationarity=stat,
        objective=obj, history=history,
    )
    return _solution(problem, lam, report, nu)


def _active_set_multipliers(K, lam, r, J, eps) -> np.ndarray:
    """Least-squares certificate multipliers over the active constraints.

    A band constraint is active at its boundary; an active upper (lower) edge
    admits only nonpositive (nonnegative) multipliers, so wrong-signed
    components are zeroed.  Zero-tolerance rows are always active and
    unsigned."""
    slack = eps - np.abs(r)
    active = (eps == 0.0) | (slack <= 1e-7 * (1.0 + eps))
    nu = np.zeros(eps.shape[0])
    if not np.any(active):
        return nu
    sol, *_ = np.linalg.lstsq(J[active].T, 2.0 * K @ lam, rcond=None)
    sign_ok = (eps[active] == 0.0) | (sol * np.sign(r[active]) <= 0.0)
    nu[np.flatnonzero(active)[sign_ok]] = sol[sign_ok]
    return nu


def _equality_newton(problem, K, lam0, idx, targets, cfg):
    """Null-space SQP for min l^T K l subject to r_i(l) = t_i over rows idx.

    Each step restores linearized feasibility with a minimum-norm correction
    and minimizes the quadratic objective over the tangent space of the
    active Jacobian; this avoids the ill-conditioned saddle system.
    Returns (lam, nu, stationarity, violation, ok)."""
    lam = lam0.copy()
    mA = idx.shape[0]
    nu = np.zeros(mA)
    stat = viol = np.inf
    for _ in range(60):
        r, J = residual_and_jacobian(problem, lam)
        JA = J[idx]
        rA = r[idx] - targets
        g = 2.0 * K @ lam
        U, s, Vt = np.linalg.svd(JA)
        rank = int(np.sum(s > (s[0] if s.size else 0.0) * 1e-12))
        nu, *_ = np.linalg.lstsq(JA.T, g, rcond=None)
        stat = float(np.linalg.norm(g - JA.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
        viol = float(np.max(np.abs(rA))) if mA else 0.0
        if stat <= cfg.tol_stationarity and viol <= cfg.tol_constraint:
            return lam, nu, stat, viol, True
        dp = Vt[:rank].T @ ((U[:, :rank].T @ (-rA)) / s[:rank])
        Z = Vt[rank:].T
        lb = lam + dp
        if Z.shape[1]:
            Hy = Z.T @ K @ Z
            gy = Z.T @ (K @ lb)
            y, *_ = np.linalg.lstsq(Hy, -gy, rcond=None)
            step = dp + Z @ y
        else:
            step = dp
        if not np.all(np.isfinite(step)):
            return lam, nu, stat, viol, False
        base = float(np.linalg.norm(rA))
        t = 1.0
        while t > 1e-12:
            lt = lam + t * step
            rt = residual_vector(problem, lt)
            vt = float(np.linalg.norm(rt[idx] - targets))
            if vt <= max(base * (1.0 - 0.5 * t), cfg.tol_constraint) or t <= 1e-10:
                break
            t *= cfg.linesearch_shrink
        moved = float(np.linalg.norm(t * step))
        lam = lam + t * step
        if moved <= 1e-15 * (1.0 + float(np.linalg.norm(lam))):
            break
    r, J = residual_and_jacobian(problem, lam)
    g = 2.0 * K @ lam
    nu, *_ = np.linalg.lstsq(J[idx].T, g, rcond=None)
    stat = float(np.linalg.norm(g - J[idx].T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
    rA = r[idx] - targets
    viol = float(np.max(np.abs(rA))) if mA else 0.0
    return lam, nu, stat, viol, stat <= cfg.tol_stationarity and viol <= cfg.tol_constraint


def _polish_active_set(problem, K, lam, cfg):
    """Refine a near-optimal band-constrained iterate by active-set SQP.

    Pins the rows at (or near) their band edge to the edge value, solves the
    resulting equality problem exactly, then repairs the working set: newly
    violated inactive rows are added, wrong-signed edge multipliers are
    dropped.  Returns (lam, nu, ok)."""
    eps = problem.tolerances
    m = eps.shape[0]
    r, _ = residual_and_jacobian(problem, lam)
    # edge[i]: -1 / +1 pins row i to its lower / upper band edge, 0 pins an
    # equality row to its target; rows with edge unset are left free
    edge = np.zeros(m)
    in_set = eps == 0.0
    near = (~in_set) & (np.abs(r) >= eps - 1e-5 * (1.0 + eps))
    edge[near] = np.sign(r[near])
    in_set |= near
    work = lam
    for _ in range(3 * m + 4):
        idx = np.flatnonzero(in_set)
        if idx.shape[0] == 0:
            return work, np.zeros(m), True
        targets = edge[idx] * eps[idx]
        cand, nuA, stat, violA, ok = _equality_newton(problem, K, work, idx, targets, cfg)
        rc, Jc = residual_and_jacobian(problem, cand)
        gc = 2.0 * K @ cand
        if not ok:
            if violA > cfg.tol_constraint:
                return lam, None, False
            # stationarity unattainable over this working set: activate the
            # free row most aligned with the remaining gradient direction
            d = gc - Jc[idx].T @ nuA
            free = np.flatnonzero(~in_set)
            if free.shape[0] == 0:
                return lam, None, False
            rates = Jc[free] @ (-d)
            scales = np.linalg.norm(Jc[free], axis=1) + 1e-300
            pick = free[int(np.argmax(np.abs(rates) / scales))]
            if abs(rates[int(np.argmax(np.abs(rates) / scales))]) == 0.0:
                return lam, None, False
            in_set[pick] = True
            edge[pick] = np.sign(rates[int(np.argmax(np.abs(rates) / scales))])
            work, r = cand, rc
            continue
        bad = (~in_set) & (np.abs(rc) > eps + cfg.tol_constraint)
        if np.any(bad):
            new = np.flatnonzero(bad)
            in_set[new] = True
            edge[new] = np.sign(rc[new])
            work, r = cand, rc
            continue
        # an active upper (lower) edge admits only nonpositive (nonnegative)
        # multipliers in the convention 2 K l = J^T nu
        signed = nuA * edge[idx]
        tol_sign = 1e-8 * (1.0 + float(np.max(np.abs(nuA))))
        wrong = (eps[idx] > 0.0) & (signed > tol_sign)
        if np.any(wrong):
            drop = idx[np.flatnonzero(wrong)[np.argmax(signed[wrong])]]
            in_set[drop] = False
            edge[drop] = 0.0
            work, r = cand, rc
            continue
        nu = np.zeros(m)
        nu[idx] = nuA
        return cand, nu, True
    return lam, None, False


def solve_min_norm_inequality(problem: RecoveryProblem, cfg: SolverConfig) -> RecoverySolution:
    """Augmented-Lagrangian solver for |r_n| <= eps_n constraints.

    Each band constraint is split as r_n - eps_n <= 0 and -r_n - eps_n <= 0
    with squared-hinge augmentation and multiplier updates, so feasibility is
    reached at moderate penalty values instead of only in the penalty limit.
    Inner minimizations are Gauss-Newton with backtracking line search; an
    equality problem is accepted as the eps = 0 limit.
    """
    if problem.kind not in (RELAXED, EQUALITY):
        raise InputError("solve_min_norm_inequality requires a relaxed problem")
    K = problem.gram.entries
    n = K.shape[0]
    eps = problem.tolerances
    m = eps.shape[0]
    R = _chol_factor(problem)
    lam = np.zeros(n)
    a = np.zeros(m)  # multipliers of r - eps <= 0
    b = np.zeros(m)  # multipliers of -r - eps <= 0
    rho = cfg.penalty_init
    history = []
    converged = False
    total_iters = 0
    inner_cap = max(10, cfg.max_iters // 5)

    def augmented(l, rho, a, b):
        """Value and ingredients of the augmented objective at l."""
        r, J = residual_and_jacobian(problem, l)
        p = np.maximum(a + rho * (r - eps), 0.0)
        q = np.maximum(b + rho * (-r - eps), 0.0)
        val = _objective(problem, l) + (float(p @ p - a @ a) + float(q @ q - b @ b)) / (2.0 * rho)
        return val, r, J, p, q

    def augmented_value(l, rho, a, b):
        r = residual_vector(problem, l)
        p = np.maximum(a + rho * (r - eps), 0.0)
        q = np.maximum(b + rho * (-r - eps), 0.0)
        return _objective(problem, l) + (float(p @ p - a @ a) + float(q @ q - b @ b)) / (2.0 * rho)

    viol_prev = np.inf
    damp = 1e-8
    for _ in range(cfg.max_iters):
        inner_tol = max(cfg.tol_stationarity,
                        min(1e-2, 0.01 * viol_prev) if np.isfinite(viol_prev) else 1e-2)
        for _ in range(inner_cap):
            total_iters += 1
            val, r, J, p, q = augmented(lam, rho, a, b)
            grad = 2.0 * K @ lam + J.T @ (p - q)
            stat = float(np.linalg.norm(grad)) / (1.0 + float(np.linalg.norm(lam)))
            history.append((_norm_from_objective(_objective(problem, lam)),
                            _violation(problem, r)))
            if stat <= inner_tol:
                break
            # Gauss-Newton model of [R l; p/sqrt(2 rho); q/sqrt(2 rho)] with
            # adaptive damping; damping keeps steps short near hinge kinks,
            # where the undamped model badly overshoots
            sq = math.sqrt(rho / 2.0)
            rows, resid = [R], [R @ lam]
            up, dn = p > 0.0, q > 0.0
            if np.any(up):
                rows.append(sq * J[up])
                resid.append(p[up] / math.sqrt(2.0 * rho))
            if np.any(dn):
                rows.append(-sq * J[dn])
                resid.append(q[dn] / math.sqrt(2.0 * rho))
            Js = np.vstack(rows)
            rs = np.concatenate(resid)
            H = Js.T @ Js
            g = Js.T @ rs
            scale = max(float(np.trace(H)) / n, 1e-300)
            improved = False
            for _ in range(30):
                try:
                    step = np.linalg.solve(H + damp * scale * np.eye(n), -g)
                except np.linalg.LinAlgError:
                    damp = min(damp * 10.0, 1e16)
                    continue
                if not np.all(np.isfinite(step)):
                    damp = min(damp * 10.0, 1e16)
                    continue
                if augmented_value(lam + step, rho, a, b) <= val - 1e-14:
                    lam = lam + step
                    damp = max(damp / 3.0, 1e-14)
                    improved = True
                    break
                if damp >= 1e16:
                    break
                damp = min(damp * 10.0, 1e16)
            if not improved:
                break  # numeric floor of the inner model reached
        _, r, J, p, q = augmented(lam, rho, a, b)
        a, b = p, q
        nu = b - a
        viol = _violation(problem, r)
        stat = float(np.linalg.norm(2.0 * K @ lam - J.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
        if viol <= cfg.tol_constraint:
            refined = _active_set_multipliers(K, lam, r, J, eps)
            rstat = float(np.linalg.norm(2.0 * K @ lam - J.T @ refined)) / (
                1.0 + float(np.linalg.norm(lam)))
            if rstat < stat:
                nu, stat = refined, rstat
            if stat <= cfg.tol_stationarity:
                a = np.maximum(-nu, 0.0)
                b = np.maximum(nu, 0.0)
                converged = True
                break
        if viol > 0.25 * viol_prev and rho < 1e12:
            rho *= cfg.penalty_growth
        viol_prev = viol
    if not converged and m > 0:
        plam, pnu, ok = _polish_active_set(problem, K, lam, cfg)
        if ok:
            lam = plam
            a = np.maximum(-pnu, 0.0)
            b = np.maximum(pnu, 0.0)
            converged = True
    r, J = residual_and_jacobian(problem, lam)
    nu = b - a
    stat = float(np.linalg.norm(2.0 * K @ lam - J.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
    viol = _violation(problem, r)
    obj = _norm_from_objective(_objective(problem, lam))
    report = SolveReport(
        converged=converged and viol <= cfg.tol_constraint and stat <= cfg.tol_stationarity,
        iters=total_iters, final_constraint_violation=viol,
        final_stationarity=stat, objective=obj, history=history,
    )
    return _solution(problem, lam, report, nu)


def kkt_residual(problem: RecoveryProblem, solution: RecoverySolution):
    """First-order optimality certificate (stationarity, feasibility,
    complementarity) for a solution of this problem."""
    lam = solution.fn.coeffs
    nu = solution.multipliers
    K = problem.gram.entries
    r, J = residual_and_jacobian(problem, lam)
    stationarity = float(np.linalg.norm(2.0 * K @ lam - J.T @ nu)) / (1.0 + float(np.linalg.norm(lam)))
    feasibility = _violation(problem, r)
    eps = problem.tolerances
    if problem.kind == RELAXED:
        complementarity = float(np.max(np.abs(nu) * np.maximum(eps - np.abs(r), 0.0)))
    else:
        complementarity = 0.0
    return stationarity, feasibility, complementarity
