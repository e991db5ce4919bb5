"""Pointwise nonlinear operators and assembly of finite-dimensional recovery
problems.

A recovery problem collects a representer basis (atomic operator-at-point
functionals plus quadrature composites for weak pairings), the Gram matrix of
that basis, and a list of constraints.  Each constraint aggregates linear
terms (basis values with coefficients) and nonlinear terms (a pointwise map F
applied to selected basis values), compared against a target within a
tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, InputError
from .kernels import (
    CompositeFunctional,
    KernelSpec,
    OperatorFunctional,
    OperatorTag,
    gram,
    identity,
)
from .measurements import (
    DiracPoint,
    Domain,
    MeasurementTarget,
    Quadrature,
    boundary_quadrature,
)

EQUALITY = "equality"
RELAXED = "relaxed"
REGULARIZED = "regularized"


@dataclass(frozen=True)
class PointwiseOp:
    """F(L_1 u(x), ..., L_Q u(x), x): operator tags plus the scalar map F and
    its partial derivatives dF.

    F(z, x) -> float with z a length-Q vector; dF(z, x) -> length-Q vector.
    dF is validated against finite differences of F at construction.
    """

    ops: tuple[OperatorTag, ...]
    F: callable
    dF: callable
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not self.ops:
            raise InputError("at least one operator tag required")
        self._validate_partials()

    @property
    def Q(self) -> int:
        return len(self.ops)

    def _validate_partials(self, trials: int = 100, step: float = 1e-6,
                           rtol: float = 1e-5):
        rng = np.random.default_rng(0)
        Zs, Xs, Fs, dFs = [], [], [], []
        for _ in range(trials):
            z = rng.uniform(-2.0, 2.0, self.Q)
            x = rng.uniform(0.0, 1.0, 2)
            analytic = np.asarray(self.dF(z, x), dtype=float)
            fd = np.empty(self.Q)
            for q in range(self.Q):
                zp, zm = z.copy(), z.copy()
                zp[q] += step
                zm[q] -= step
                fd[q] = (self.F(zp, x) - self.F(zm, x)) / (2 * step)
            scale = max(1.0, float(np.max(np.abs(fd))))
            if np.max(np.abs(analytic - fd)) > rtol * scale:
                raise InputError("dF does not match finite differences of F")
            Zs.append(z); Xs.append(x); Fs.append(float(self.F(z, x))); dFs.append(analytic)
        # probe whether F/dF broadcast over batched arguments (z as (Q, T),
        # x as (T, d)); if so residual assembly can skip per-point loops
        vectorized = False
        try:
            Z = np.asarray(Zs).T
            X = np.asarray(Xs)
            fv = np.asarray(self.F(Z, X), dtype=float)
            dv = np.asarray(self.dF(Z, X), dtype=float)
            vectorized = (
                fv.shape == (trials,)
                and np.allclose(fv, Fs, rtol=1e-12, atol=1e-12)
                and dv.shape == (self.Q, trials)
                and np.allclose(dv.T, dFs, rtol=1e-12, atol=1e-12)
            )
        except Exception:
            vectorized = False
        object.__setattr__(self, "_vectorized", vectorized)


@dataclass(frozen=True)
class DecomposedOp:
    """Split operator: a principal linear part paired in weak form plus a
    pointwise nonlinear perturbation."""

    linear: OperatorTag
    nonlinear: PointwiseOp


@dataclass(frozen=True)
class Region:
    """A subdomain: the interior of a box, its boundary, or an explicit
    finite point set (e.g. a single corner with its own boundary operator)."""

    kind: str  # "interior" | "boundary" | "points"
    domain: Domain
    points: tuple = ()

    def __post_init__(self):
        if self.kind not in ("interior", "boundary", "points"):
            raise InputError("region kind must be 'interior', 'boundary' or 'points'")
        pts = tuple(tuple(float(c) for c in p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if self.kind == "points" and not pts:
            raise InputError("a points region needs at least one point")

    def contains(self, x, tol: float = 1e-12) -> bool:
        if self.kind == "points":
            return any(
                max(abs(a - b) for a, b in zip(x, p)) <= tol for p in self.points
            )
        if self.kind == "boundary":
            return self.domain.on_boundary(x, tol)
        return self.domain.contains(x, tol) and not self.domain.on_boundary(x, tol)


@dataclass(frozen=True)
class Subdomain:
    domain_tag: int
    region: Region
    operator: object  # PointwiseOp | DecomposedOp | OperatorTag


@dataclass(frozen=True)
class MultiDomainOp:
    """Piecewise operator over disjoint subdomains (e.g. interior PDE plus
    boundary condition)."""

    subdomains: tuple[Subdomain, ...]

    def __post_init__(self):
        object.__setattr__(self, "subdomains", tuple(self.subdomains))
        tags = [s.domain_tag for s in self.subdomains]
        if len(set(tags)) != len(tags):
            raise InputError("domain tags must be unique")


@dataclass(frozen=True)
class NonlinearTerm:
    """One summand c * F(z at point) of a constraint; z_indices select the
    basis entries carrying the operator values at the point."""

    coeff: float
    op: PointwiseOp
    z_indices: tuple[int, ...]
    point: tuple[float, ...]


@dataclass(frozen=True)
class Constraint:
    linear: tuple[tuple[int, float], ...]
    nonlinear: tuple[NonlinearTerm, ...]
    target: float
    tolerance: float = 0.0


@dataclass
class RecoveryProblem:
    """An assembled finite-dimensional recovery instance."""

    kernel: KernelSpec
    basis: tuple
    gram: "object"
    constraints: tuple[Constraint, ...]
    kind: str

    def __post_init__(self):
        n = len(self.basis)
        for c in self.constraints:
            for i, _ in c.linear:
                if not 0 <= i < n:
                    raise InputError("constraint references basis index out of range")
            for t in c.nonlinear:
                if any(not 0 <= i < n for i in t.z_indices):
                    raise InputError("constraint references basis index out of range")
        if self.kind == EQUALITY and any(c.tolerance != 0.0 for c in self.constraints):
            raise InputError("equality problems must have zero tolerances")

    @property
    def tolerances(self) -> np.ndarray:
        return np.asarray([c.tolerance for c in self.constraints])


class _BasisBuilder:
    """Deduplicating basis accumulator with stable insertion order."""

    def __init__(self):
        self.items: list = []
        self._index: dict = {}

    def add(self, fnl) -> int:
        key = fnl
        if key in self._index:
            return self._index[key]
        self._index[key] = len(self.items)
        self.items.append(fnl)
        return len(self.items) - 1

    def add_composite(self, fnl: CompositeFunctional) -> int:
        self.items.append(fnl)
        return len(self.items) - 1


def _nonlinear_term(builder: _BasisBuilder, op: PointwiseOp, coeff: float,
                    point, domain_tag: int = 0) -> NonlinearTerm:
    pt = tuple(float(c) for c in np.atleast_1d(point))
    idx = tuple(
        builder.add(OperatorFunctional(tag, pt, domain_tag)) for tag in op.ops
    )
    return NonlinearTerm(coeff=float(coeff), op=op, z_indices=idx, point=pt)


def _weak_pairing_functional(tag: OperatorTag, phi, quad: Quadrature,
                             domain_tag: int = 0) -> CompositeFunctional:
    """Quadrature composite realizing [L u, phi] for a non-Dirac test function.

    The negative Laplacian is paired in weak form (grad-grad); identity as a
    plain weighted integral.
    """
    parts: list[tuple[float, OperatorFunctional]] = []
    if tag.kind == "neg_laplacian":
        gphi = phi.grad(quad.nodes)
        for node, w, g in zip(quad.nodes, quad.weights, gphi):
            for i in range(node.shape[0]):
                c = w * g[i]
                if c != 0.0:
                    parts.append((float(c), OperatorFunctional(
                        OperatorTag("gradient", component=i), tuple(node), domain_tag)))
    elif tag.kind == "identity":
        vphi = phi.value(quad.nodes)
        for node, w, v in zip(quad.nodes, quad.weights, vphi):
            c = w * v
            if c != 0.0:
                parts.append((float(c), OperatorFunctional(identity(), tuple(node), domain_tag)))
    else:
        raise CapabilityError(f"no weak-form pairing for operator kind {tag.kind!r}")
    if not parts:
        raise InputError("weak pairing vanished identically on the quadrature rule")
    return CompositeFunctional(parts=tuple(parts), domain_tag=domain_tag)


def _finalize(kernel, builder, constraints, nugget=None) -> RecoveryProblem:
    kind = EQUALITY if all(c.tolerance == 0.0 for c in constraints) else RELAXED
    return RecoveryProblem(
        kernel=kernel,
        basis=tuple(builder.items),
        gram=gram(kernel, builder.items, nugget=nugget),
        constraints=tuple(constraints),
        kind=kind,
    )


def assemble_point_problem(op: PointwiseOp, points, targets, kernel: KernelSpec,
                           nugget: float | None = None) -> RecoveryProblem:
    """Equality collocation: F(u)(x_n) = target_n at each point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if points.shape[0] == 0:
        raise InputError("need at least one collocation point")
    if points.shape[0] != targets.shape[0]:
        raise InputError("targets length must match point count")
    builder = _BasisBuilder()
    constraints = []
    for x, t in zip(points, targets):
        term = _nonlinear_term(builder, op, 1.0, x)
        constraints.append(Constraint(linear=(), nonlinear=(term,), target=float(t)))
    return _finalize(kernel, builder, constraints, nugget)


def assemble_relaxed_problem(op: PointwiseOp, measurements, kernel: KernelSpec,
                             nugget: float | None = None) -> RecoveryProblem:
    """Inequality-constrained recovery with point-approximated test functions:
    |sum_m c_m F(u)(x_m) - target| <= tolerance per measurement."""
    if not measurements:
        raise InputError("need at least one measurement")
    builder = _BasisBuilder()
    constraints = []
    for meas in measurements:
        if meas.point_approx is None:
            raise InputError("relaxed measurements require a point approximation")
        terms = tuple(
            _nonlinear_term(builder, op, c, x)
            for x, c in zip(meas.point_approx.points, meas.point_approx.coeffs)
        )
        constraints.append(Constraint(
            linear=(), nonlinear=terms, target=meas.target, tolerance=meas.tolerance,
        ))
    return _finalize(kernel, builder, constraints, nugget)


def assemble_decomposed_problem(op: DecomposedOp, measurements, quad: Quadrature,
                                kernel: KernelSpec,
                                nugget: float | None = None) -> RecoveryProblem:
    """Linear part paired in weak form against the test function, nonlinear
    part evaluated through the point approximation."""
    if not measurements:
        raise InputError("need at least one measurement")
    builder = _BasisBuilder()
    constraints = []
    for meas in measurements:
        linear_terms: list[tuple[int, float]] = []
        nonlinear_terms: list[NonlinearTerm] = []
        phi = meas.test_fn
        if isinstance(phi, DiracPoint):
            idx = builder.add(OperatorFunctional(op.linear, phi.point))
            linear_terms.append((idx, 1.0))
        else:
            idx = builder.add_composite(_weak_pairing_functional(op.linear, phi, quad))
            linear_terms.append((idx, 1.0))
        if meas.point_approx is None:
            raise InputError("decomposed measurements require a point approximation")
        for x, c in zip(meas.point_approx.points, meas.point_approx.coeffs):
            nonlinear_terms.append(_nonlinear_term(builder, op.nonlinear, c, x))
        constraints.append(Constraint(
            linear=tuple(linear_terms), nonlinear=tuple(nonlinear_terms),
            target=meas.target, tolerance=meas.tolerance,
        ))
    return _finalize(kernel, builder, constraints, nugget)


def _region_quadrature(region: Region, quad: Quadrature) -> Quadrature:
    if region.kind == "interior":
        return quad
    if region.kind == "boundary":
        return boundary_quadrature(region.domain)
    raise CapabilityError("weak pairings need an interior or boundary region")


def assemble_multidomain_problem(op: MultiDomainOp, measurements, quad: Quadrature,
                                 kernel: KernelSpec,
                                 nugget: float | None = None) -> RecoveryProblem:
    """Piecewise assembly: each constraint sums per-subdomain contributions.

    Pointwise subdomain operators consume the measurement's point
    approximation (points are routed to the subdomain containing them);
    linear-tag subdomains contribute quadrature pairings, decomposed
    subdomains contribute both.
    """
    if not measurements:
        raise InputError("need at least one measurement")
    builder = _BasisBuilder()
    constraints = []
    for meas in measurements:
        phi = meas.test_fn
        linear_terms: list[tuple[int, float]] = []
        nonlinear_terms: list[NonlinearTerm] = []
        for sub in op.subdomains:
            o = sub.operator
            if isinstance(o, OperatorTag):
                if isinstance(phi, DiracPoint):
                    if sub.region.contains(phi.point):
                        idx = builder.add(OperatorFunctional(o, phi.point, sub.domain_tag))
                        linear_terms.append((idx, 1.0))
                else:
                    rq = _region_quadrature(sub.region, quad)
                    try:
                        idx = builder.add_composite(
                            _weak_pairing_functional(o, phi, rq, sub.domain_tag))
                    except InputError:
                        continue  # phi vanishes on this subdomain
                    linear_terms.append((idx, 1.0))
            elif isinstance(o, DecomposedOp):
                handled = False
                if isinstance(phi, DiracPoint):
                    if sub.region.contains(phi.point):
                        idx = builder.add(OperatorFunctional(o.linear, phi.point, sub.domain_tag))
                        linear_terms.append((idx, 1.0))
                        handled = True
                else:
                    rq = _region_quadrature(sub.region, quad)
                    try:
                        idx = builder.add_composite(
                            _weak_pairing_functional(o.linear, phi, rq, sub.domain_tag))
                        linear_terms.append((idx, 1.0))
                        handled = True
                    except InputError:
                        pass
                if handled and meas.point_approx is not None:
                    for x, c in zip(meas.point_approx.points, meas.point_approx.coeffs):
                        if sub.region.contains(x) and c != 0.0:
                            nonlinear_terms.append(
                                _nonlinear_term(builder, o.nonlinear, c, x, sub.domain_tag))
            elif isinstance(o, PointwiseOp):
                if meas.point_approx is None:
                    raise InputError(
                        "pointwise subdomain operators require a point approximation")
                for x, c in zip(meas.point_approx.points, meas.point_approx.coeffs):
                    if sub.region.contains(x) and c != 0.0:
                        nonlinear_terms.append(
                            _nonlinear_term(builder, o, c, x, sub.domain_tag))
            else:
                raise InputError(f"unsupported subdomain operator {type(o).__name__}")
        if not linear_terms and not nonlinear_terms:
            raise InputError("measurement supported on a region no subdomain covers")
        constraints.append(Constraint(
            linear=tuple(linear_terms), nonlinear=tuple(nonlinear_terms),
            target=meas.target, tolerance=meas.tolerance,
        ))
    return _finalize(kernel, builder, constraints, nugget)


def _constraint_plan(problem: RecoveryProblem):
    """Cached per-constraint index/coefficient arrays, with nonlinear terms
    grouped by their pointwise map for batched evaluation."""
    plan = getattr(problem, "_plan", None)
    if plan is not None:
        return plan
    plan = []
    for con in problem.constraints:
        lin_idx = np.asarray([i for i, _ in con.linear], dtype=int)
        lin_c = np.asarray([c for _, c in con.linear])
        groups = []
        by_op: dict = {}
        for term in con.nonlinear:
            by_op.setdefault(id(term.op), (term.op, []))[1].append(term)
        for op, terms in by_op.values():
            idx = np.asarray([t.z_indices for t in terms], dtype=int)
            coef = np.asarray([t.coeff for t in terms])
            pts = np.asarray([t.point for t in terms])
            groups.append((op, idx, coef, pts))
        plan.append((lin_idx, lin_c, groups))
    problem._plan = plan
    return plan


def _group_values(op, Z, pts):
    """F over a (T, Q) batch of basis values, via the broadcast path when the
    pointwise map supports it."""
    if getattr(op, "_vectorized", False):
        return np.asarray(op.F(Z.T, pts), dtype=float)
    return np.asarray([op.F(Z[t], pts[t]) for t in range(Z.shape[0])])


def _group_partials(op, Z, pts):
    """dF over a (T, Q) batch, returned as (T, Q)."""
    if getattr(op, "_vectorized", False):
        return np.asarray(op.dF(Z.T, pts), dtype=float).T
    return np.asarray([op.dF(Z[t], pts[t]) for t in range(Z.shape[0])], dtype=float)


def residual_vector(problem: RecoveryProblem, lam: np.ndarray) -> np.ndarray:
    """Constraint residuals r(lambda) only (cheap path for line searches)."""
    lam = np.asarray(lam, dtype=float)
    K = problem.gram.entries
    if lam.shape[0] != K.shape[0]:
        raise InputError("lambda length must match basis size")
    z = K @ lam
    r = np.zeros(len(problem.constraints))
    for n, (lin_idx, lin_c, groups) in enumerate(_constraint_plan(problem)):
        acc = -problem.constraints[n].target
        if lin_idx.size:
            acc += float(lin_c @ z[lin_idx])
        for op, idx, coef, pts in groups:
            acc += float(coef @ _group_values(op, z[idx], pts))
        r[n] = acc
    return r


def residual_and_jacobian(problem: RecoveryProblem, lam: np.ndarray):
    """Constraint residuals r(lambda) and Jacobian dr/dlambda.

    Basis values are read as z = K lambda (representer values of the current
    iterate), never by re-evaluating kernels.
    """
    lam = np.asarray(lam, dtype=float)
    K = problem.gram.entries
    if lam.shape[0] != K.shape[0]:
        raise InputError("lambda length must match basis size")
    z = K @ lam
    n_con = len(problem.constraints)
    r = np.zeros(n_con)
    J = np.zeros((n_con, lam.shape[0]))
    for n, (lin_idx, lin_c, groups) in enumerate(_constraint_plan(problem)):
        acc = -problem.constraints[n].target
        if lin_idx.size:
            acc += float(lin_c @ z[lin_idx])
            J[n] += lin_c @ K[lin_idx]
        for op, idx, coef, pts in groups:
            Z = z[idx]
            acc += float(coef @ _group_values(op, Z, pts))
            W = coef[:, None] * _group_partials(op, Z, pts)  # (T, Q)
            J[n] += W.ravel() @ K[idx.ravel()]
        r[n] = acc
    return r, J
