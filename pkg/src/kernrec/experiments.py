"""Manufactured-solution cases, convergence studies and error metrics.

The concrete running example is the steady reaction-diffusion equation
-Lap(u) + u^3 = f on the unit interval/square with Dirichlet or Robin
boundary data.  A manufactured solution u* fixes f analytically, so sweeps
over the number of measurements N, the point-approximation scale M, or the
regularization weight mu can report exact errors.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import CapabilityError, InputError
from .kernels import (
    KernelSpec,
    OperatorTag,
    RkhsFunction,
    identity,
    neg_laplacian,
    normal_derivative,
    rkhs_distance,
    rkhs_eval_grid,
    rkhs_norm,
)
from .measurements import (
    DiracPoint,
    Domain,
    Field,
    FourierSine,
    HatFunction,
    MeasurementTarget,
    approximate_test_function,
    default_probes,
    epsilon_schedule,
    gauss_legendre,
    midpoint,
    pair_data,
    reference_quadrature,
)
from .problem import (
    DecomposedOp,
    MultiDomainOp,
    PointwiseOp,
    RecoveryProblem,
    Region,
    Subdomain,
    assemble_multidomain_problem,
)
from .solvers import (
    RecoverySolution,
    SolverConfig,
    solve_min_norm_equality,
    solve_min_norm_inequality,
    solve_regularized,
)

CSV_HEADER = "control,L2,Linf,norm,kkt,violation,converged,seconds"

FORMULATIONS = ("NOR_points", "Relaxed", "Decomposed", "MultiDomain", "Regularized")


# ---------------------------------------------------------------------------
# pointwise operators of the reaction-diffusion example


def cubic_reaction_op() -> PointwiseOp:
    """-Lap(u) + u^3 in strong form."""
    return PointwiseOp(
        ops=(neg_laplacian(), identity()),
        F=lambda z, x: z[0] + z[1] ** 3,
        dF=lambda z, x: np.array([np.ones_like(z[0]), 3.0 * z[1] ** 2]),
        name="cubic_reaction",
    )


def laplace_op() -> PointwiseOp:
    """-Lap(u): the linear diffusion operator."""
    return PointwiseOp(
        ops=(neg_laplacian(),),
        F=lambda z, x: z[0],
        dF=lambda z, x: np.ones_like(z),
        name="neg_laplacian",
    )


def identity_op() -> PointwiseOp:
    return PointwiseOp(
        ops=(identity(),),
        F=lambda z, x: z[0],
        dF=lambda z, x: np.ones_like(z),
        name="identity",
    )


def cubic_only_op() -> PointwiseOp:
    """u^3: the nonlinear perturbation of the decomposed splitting."""
    return PointwiseOp(
        ops=(identity(),),
        F=lambda z, x: z[0] ** 3,
        dF=lambda z, x: 3.0 * z * z,
        name="cubic",
    )


def robin_trace_op(normal) -> PointwiseOp:
    """u + du/dn at a boundary point with fixed outward normal."""
    return PointwiseOp(
        ops=(identity(), normal_derivative(normal)),
        F=lambda z, x: z[0] + z[1],
        dF=lambda z, x: np.ones_like(z),
        name="robin_trace",
    )


# ---------------------------------------------------------------------------
# manufactured fields and cases


def sine_1d() -> Field:
    pi = np.pi
    return Field(
        value=lambda X: np.sin(pi * X[:, 0]),
        grad=lambda X: (pi * np.cos(pi * X[:, 0]))[:, None],
        lap=lambda X: -(pi**2) * np.sin(pi * X[:, 0]),
    )


def sine_2d() -> Field:
    pi = np.pi
    return Field(
        value=lambda X: np.sin(pi * X[:, 0]) * np.sin(pi * X[:, 1]),
        grad=lambda X: pi * np.column_stack([
            np.cos(pi * X[:, 0]) * np.sin(pi * X[:, 1]),
            np.sin(pi * X[:, 0]) * np.cos(pi * X[:, 1]),
        ]),
        lap=lambda X: -2.0 * pi**2 * np.sin(pi * X[:, 0]) * np.sin(pi * X[:, 1]),
    )


def apply_tag_to_field(tag: OperatorTag, u: Field, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if tag.kind == "identity":
        return u(X)
    if tag.kind == "neg_laplacian":
        if u.lap is None:
            raise CapabilityError("field is missing a Laplacian")
        return -np.asarray(u.lap(X))
    if u.grad is None:
        raise CapabilityError("field is missing a gradient")
    g = np.asarray(u.grad(X))
    if tag.kind == "gradient":
        return g[:, tag.component]
    return g @ np.asarray(tag.normal)


def apply_pointwise(op: PointwiseOp, u: Field, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.column_stack([apply_tag_to_field(tag, u, X) for tag in op.ops])
    return np.asarray([op.F(Z[i], X[i]) for i in range(X.shape[0])])


def _interior_operator(operator):
    if isinstance(operator, MultiDomainOp):
        for sub in operator.subdomains:
            if sub.region.kind == "interior":
                return sub.operator
        raise InputError("multi-domain operator lacks an interior subdomain")
    return operator


def manufacture_rhs(u_star: Field, operator) -> Field:
    """Forcing f with f(x) = (operator u*)(x), composed analytically."""
    op = _interior_operator(operator)
    if isinstance(op, DecomposedOp):
        lin, nonlin = op.linear, op.nonlinear
        return Field(value=lambda X: (
            apply_tag_to_field(lin, u_star, X) + apply_pointwise(nonlin, u_star, X)
        ))
    if isinstance(op, PointwiseOp):
        return Field(value=lambda X: apply_pointwise(op, u_star, X))
    if isinstance(op, OperatorTag):
        return Field(value=lambda X: apply_tag_to_field(op, u_star, X))
    raise InputError(f"cannot manufacture data for {type(op).__name__}")


def _fd_neg_laplacian(u: Field, X, dim: int, h: float = 1e-3) -> np.ndarray:
    """Richardson-extrapolated 4th-order finite-difference -Lap(u), used only
    to validate manufactured data."""
    X = np.atleast_2d(np.asarray(X, dtype=float))

    def second(step):
        out = np.zeros(X.shape[0])
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = step
            out += (
                -u(X + 2 * e) + 16 * u(X + e) - 30 * u(X)
                + 16 * u(X - e) - u(X - 2 * e)
            ) / (12 * step**2)
        return out

    c, f = second(h), second(h / 2)
    return -(16 * f - c) / 15.0


@dataclass
class ManufacturedCase:
    """An analytic solution, its operator, boundary kind and derived forcing."""

    name: str
    dim: int
    domain: Domain
    u_star: Field
    operator: object
    boundary: str  # "dirichlet0" | "robin"
    f: Field = None
    g_boundary: object = None  # callable (points, normals) -> values

    def __post_init__(self):
        if self.boundary not in ("dirichlet0", "robin"):
            raise InputError("boundary must be 'dirichlet0' or 'robin'")
        if self.f is None:
            self.f = manufacture_rhs(self.u_star, self.operator)
        if self.g_boundary is None:
            self.g_boundary = lambda pts, normals: np.zeros(np.atleast_2d(pts).shape[0])
        self._validate()

    def _validate(self):
        if self.boundary == "dirichlet0":
            bpts, _ = self.domain.boundary_points(n_per_edge=6)
            if np.max(np.abs(self.u_star(bpts))) > 1e-12:
                raise InputError("manufactured solution must vanish on the boundary")
        rng = np.random.default_rng(7)
        lo = np.asarray(self.domain.lower)
        hi = np.asarray(self.domain.upper)
        X = lo + (hi - lo) * rng.uniform(0.05, 0.95, (100, self.dim))
        op = _interior_operator(self.operator)
        if isinstance(op, DecomposedOp):
            fd = apply_pointwise(op.nonlinear, self.u_star, X)
            if op.linear.kind == "neg_laplacian":
                fd = fd + _fd_neg_laplacian(self.u_star, X, self.dim)
            else:
                fd = fd + apply_tag_to_field(op.linear, self.u_star, X)
        else:
            tags = op.ops
            Z = []
            for tag in tags:
                if tag.kind == "neg_laplacian":
                    Z.append(_fd_neg_laplacian(self.u_star, X, self.dim))
                else:
                    Z.append(apply_tag_to_field(tag, self.u_star, X))
            Z = np.column_stack(Z)
            fd = np.asarray([op.F(Z[i], X[i]) for i in range(X.shape[0])])
        if np.max(np.abs(fd - self.f(X))) > 1e-8 * max(1.0, float(np.max(np.abs(fd)))):
            raise InputError("forcing does not match the operator applied to u_star")


def battery() -> dict[str, ManufacturedCase]:
    """The built-in manufactured cases."""
    unit = Domain((0.0,), (1.0,))
    unit2 = Domain((0.0, 0.0), (1.0, 1.0))
    interior = Region("interior", unit)
    boundary = Region("boundary", unit)
    cases = {}
    cases["linear_poisson_1d"] = ManufacturedCase(
        name="linear_poisson_1d", dim=1, domain=unit, u_star=sine_1d(),
        operator=MultiDomainOp((
            Subdomain(0, interior, laplace_op()),
            Subdomain(1, boundary, identity_op()),
        )),
        boundary="dirichlet0",
    )
    cases["cubic_dirichlet_1d"] = ManufacturedCase(
        name="cubic_dirichlet_1d", dim=1, domain=unit, u_star=sine_1d(),
        operator=MultiDomainOp((
            Subdomain(0, interior, cubic_reaction_op()),
            Subdomain(1, boundary, identity_op()),
        )),
        boundary="dirichlet0",
    )
    cases["cubic_dirichlet_2d"] = ManufacturedCase(
        name="cubic_dirichlet_2d", dim=2, domain=unit2, u_star=sine_2d(),
        operator=MultiDomainOp((
            Subdomain(0, Region("interior", unit2), cubic_reaction_op()),
            Subdomain(1, Region("boundary", unit2), identity_op()),
        )),
        boundary="dirichlet0",
    )
    cases["cubic_decomposed_1d"] = ManufacturedCase(
        name="cubic_decomposed_1d", dim=1, domain=unit, u_star=sine_1d(),
        operator=MultiDomainOp((
            Subdomain(0, interior, DecomposedOp(neg_laplacian(), cubic_only_op())),
            Subdomain(1, boundary, identity_op()),
        )),
        boundary="dirichlet0",
    )
    u = sine_1d()
    robin = ManufacturedCase(
        name="cubic_robin_1d", dim=1, domain=unit, u_star=u,
        operator=MultiDomainOp((
            Subdomain(0, interior, DecomposedOp(neg_laplacian(), cubic_only_op())),
            Subdomain(1, boundary, identity()),
        )),
        boundary="robin",
        g_boundary=lambda pts, normals: (
            u(pts) + np.sum(np.asarray(u.grad(np.atleast_2d(pts))) * np.asarray(normals), axis=1)
        ),
    )
    cases["cubic_robin_1d"] = robin
    return cases


def default_kernel(dim: int) -> KernelSpec:
    return KernelSpec("gaussian", lengthscale=0.06 if dim == 1 else 0.3, dim=dim)


# ---------------------------------------------------------------------------
# assembly per formulation


def _boundary_dirac_measurements(case: ManufacturedCase, n_per_edge: int = 4):
    bpts, normals = case.domain.boundary_points(n_per_edge=n_per_edge)
    if case.boundary == "robin":
        targets = case.g_boundary(bpts, normals)
    else:
        targets = np.zeros(bpts.shape[0])
    out = []
    for p, t in zip(bpts, targets):
        phi = DiracPoint(case.domain, tuple(p))
        out.append(MeasurementTarget(
            test_fn=phi, target=float(t), tolerance=0.0,
            point_approx=approximate_test_function(phi, 1),
        ))
    return out, bpts, normals


def _robin_point_subdomains(case: ManufacturedCase):
    bpts, normals = case.domain.boundary_points()
    subs = []
    for tag, (p, nrm) in enumerate(zip(bpts, normals), start=1):
        subs.append(Subdomain(
            tag, Region("points", case.domain, points=(tuple(p),)),
            robin_trace_op(tuple(nrm)),
        ))
    return subs


def _default_c_hat(case: ManufacturedCase, points) -> float:
    return 2.0 * max(1.0, float(np.max(np.abs(case.f(points)))))


def _sine_measurements(case, N, M, c_hat, probes):
    out = []
    for mode in range(1, N + 1):
        phi = FourierSine(case.domain, (mode,) * case.dim)
        approx = approximate_test_function(phi, M, probes=probes)
        target = pair_data(case.f, phi, reference_quadrature(phi))
        if c_hat is None:
            c_hat_eff = _default_c_hat(case, approx.points)
        else:
            c_hat_eff = c_hat
        out.append(MeasurementTarget(
            test_fn=phi, target=target,
            tolerance=epsilon_schedule(approx.dual_error_estimate, c_hat_eff),
            point_approx=approx,
        ))
    return out


def _hat_measurements(case, N, M, c_hat, probes):
    if case.dim != 1:
        raise CapabilityError("hat measurements are 1D only")
    lo, hi = case.domain.lower[0], case.domain.upper[0]
    if case.boundary == "robin":
        if N < 2:
            raise InputError("need at least two hat nodes with Robin data")
        # half-hats at the endpoints carry the boundary pairing
        nodes = np.linspace(lo, hi, N)
        centers, lefts = nodes, np.concatenate([[nodes[0]], nodes[:-1]])
        rights = np.concatenate([nodes[1:], [nodes[-1]]])
    else:
        nodes = np.linspace(lo, hi, N + 2)
        centers, lefts, rights = nodes[1:-1], nodes[:-2], nodes[2:]
    out = []
    bpts, normals = case.domain.boundary_points()
    gvals = case.g_boundary(bpts, normals)
    for left, c, right in zip(lefts, centers, rights):
        phi = HatFunction(case.domain, float(left), float(c), float(right))
        approx = approximate_test_function(phi, M, probes=probes)
        target = pair_data(case.f, phi, reference_quadrature(phi))
        if case.boundary == "robin":
            target += float(np.sum(gvals * phi.value(bpts)))
        c_hat_eff = _default_c_hat(case, approx.points) if c_hat is None else c_hat
        out.append(MeasurementTarget(
            test_fn=phi, target=target,
            tolerance=epsilon_schedule(approx.dual_error_estimate, c_hat_eff),
            point_approx=approx,
        ))
    return out


def assemble_case(case: ManufacturedCase, formulation: str, N: int, M: int = 16,
                  kernel: KernelSpec | None = None, *, c_hat: float | None = None,
                  nugget: float | None = None,
                  measurement_family: str | None = None) -> RecoveryProblem:
    """Build the recovery problem for one battery case and formulation."""
    if formulation not in FORMULATIONS:
        raise InputError(f"unknown formulation {formulation!r}")
    if kernel is None:
        kernel = default_kernel(case.dim)
    if kernel.dim != case.dim:
        raise InputError("kernel dimension does not match case dimension")
    domain = case.domain

    if formulation in ("NOR_points", "Regularized"):
        pts = domain.interior_grid(N)
        meas = []
        for p in pts:
            phi = DiracPoint(domain, tuple(p))
            meas.append(MeasurementTarget(
                test_fn=phi, target=float(case.f(np.asarray([p]))[0]), tolerance=0.0,
                point_approx=approximate_test_function(phi, 1),
            ))
        bmeas, _, _ = _boundary_dirac_measurements(case)
        interior_op = _interior_operator(case.operator)
        if isinstance(interior_op, DecomposedOp):
            # strong form for point collocation
            interior_op = cubic_reaction_op() if interior_op.nonlinear.name == "cubic" else interior_op
        subs = [Subdomain(0, Region("interior", domain), interior_op)]
        if case.boundary == "robin":
            subs.extend(_robin_point_subdomains(case))
        else:
            subs.append(Subdomain(1, Region("boundary", domain), identity_op()))
        op = MultiDomainOp(tuple(subs))
        quad = gauss_legendre(domain, 64)
        return assemble_multidomain_problem(op, meas + bmeas, quad, kernel, nugget=nugget)

    probes = default_probes(domain)
    family = measurement_family or ("hat" if formulation == "MultiDomain" else "fourier_sine")
    if family == "fourier_sine":
        meas = _sine_measurements(case, N, M, c_hat, probes)
    elif family == "hat":
        meas = _hat_measurements(case, N, M, c_hat, probes)
    else:
        raise InputError(f"unknown measurement family {family!r}")
    # cell edges hit every hat kink so the piecewise gradients integrate cleanly
    bps = sorted({b for m in meas for b in m.test_fn.breakpoints()})
    quad = gauss_legendre(domain, 128, breakpoints=tuple(bps))

    if formulation == "Relaxed":
        interior_op = _interior_operator(case.operator)
        if isinstance(interior_op, DecomposedOp):
            raise InputError("Relaxed formulation needs a strong-form pointwise operator")
        bmeas, _, _ = _boundary_dirac_measurements(case)
        op = MultiDomainOp((
            Subdomain(0, Region("interior", domain), interior_op),
            Subdomain(1, Region("boundary", domain), identity_op()),
        ))
        return assemble_multidomain_problem(op, meas + bmeas, quad, kernel, nugget=nugget)

    # Decomposed / MultiDomain: weak linear part + pointwise nonlinearity
    interior_op = _interior_operator(case.operator)
    if not isinstance(interior_op, DecomposedOp):
        interior_op = DecomposedOp(neg_laplacian(), cubic_only_op())
    subs = [Subdomain(0, Region("interior", domain), interior_op)]
    if case.boundary == "robin":
        subs.append(Subdomain(1, Region("boundary", domain), identity()))
        return assemble_multidomain_problem(
            MultiDomainOp(tuple(subs)), meas, quad, kernel, nugget=nugget)
    bmeas, _, _ = _boundary_dirac_measurements(case)
    subs.append(Subdomain(1, Region("boundary", domain), identity_op()))
    return assemble_multidomain_problem(
        MultiDomainOp(tuple(subs)), meas + bmeas, quad, kernel, nugget=nugget)


def solve_formulation(problem: RecoveryProblem, formulation: str,
                      cfg: SolverConfig) -> RecoverySolution:
    if formulation == "Regularized":
        return solve_regularized(problem, cfg)
    if problem.kind == "equality":
        return solve_min_norm_equality(problem, cfg)
    return solve_min_norm_inequality(problem, cfg)


# ---------------------------------------------------------------------------
# metrics and references


def error_metrics(solution: RecoverySolution, u_star: Field, domain: Domain,
                  resolution: int = 1000) -> tuple[float, float]:
    """Grid L2 and Linf distance between the recovered function and u*."""
    rule = midpoint(domain, resolution)
    diff = rkhs_eval_grid(solution.fn, identity(), rule.nodes) - u_star(rule.nodes)
    l2 = math.sqrt(float(np.sum(rule.weights * diff * diff)))
    return l2, float(np.max(np.abs(diff)))


def fd_reference_1d(case: ManufacturedCase, cells: int = 10_000,
                    newton_iters: int = 50) -> Field:
    """Independent finite-difference solve of -u'' + u^3 = f on the interval,
    with the case's boundary condition, by damped Newton iteration."""
    if case.dim != 1:
        raise CapabilityError("finite-difference reference is 1D only")
    lo, hi = case.domain.lower[0], case.domain.upper[0]
    x = np.linspace(lo, hi, cells + 1)
    h = x[1] - x[0]
    fvals = case.f(x[:, None])
    u = np.zeros_like(x)
    robin = case.boundary == "robin"
    if robin:
        bpts, normals = case.domain.boundary_points()
        g = case.g_boundary(bpts, normals)
    for _ in range(newton_iters):
        n = len(x)
        rows, cols, vals = [], [], []
        res = np.zeros(n)
        interior = slice(1, n - 1)
        res[interior] = (
            -(u[:-2] - 2 * u[1:-1] + u[2:]) / h**2 + u[1:-1] ** 3 - fvals[1:-1]
        )
        for i in range(1, n - 1):
            rows += [i, i, i]
            cols += [i - 1, i, i + 1]
            vals += [-1.0 / h**2, 2.0 / h**2 + 3.0 * u[i] ** 2, -1.0 / h**2]
        if robin:
            # u - u'(lo) = g_lo ; u + u'(hi) = g_hi (second-order one-sided)
            res[0] = u[0] - (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h) - g[0]
            rows += [0, 0, 0]
            cols += [0, 1, 2]
            vals += [1.0 + 3.0 / (2 * h), -4.0 / (2 * h), 1.0 / (2 * h)]
            res[-1] = u[-1] + (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h) - g[1]
            rows += [n - 1, n - 1, n - 1]
            cols += [n - 1, n - 2, n - 3]
            vals += [1.0 + 3.0 / (2 * h), -4.0 / (2 * h), 1.0 / (2 * h)]
        else:
            res[0] = u[0]
            rows.append(0); cols.append(0); vals.append(1.0)
            res[-1] = u[-1]
            rows.append(n - 1); cols.append(n - 1); vals.append(1.0)
        if np.max(np.abs(res)) < 1e-12:
            break
        A = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        u = u - scipy.sparse.linalg.spsolve(A, res)
    return Field(value=lambda X: np.interp(np.atleast_2d(X)[:, 0], x, u))


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class StudySpec:
    case: ManufacturedCase
    formulation: str
    sweep: tuple
    kernel: KernelSpec
    solver: SolverConfig
    fixed: dict = dc_field(default_factory=dict)
    eval_grid: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "sweep", tuple(self.sweep))
        if not self.sweep:
            raise InputError("sweep must be nonempty")
        if list(self.sweep) != sorted(set(self.sweep)):
            raise InputError("sweep must be strictly increasing")


@dataclass
class StudyRow:
    control: float
    L2: float
    Linf: float
    norm: float
    kkt: float
    violation: float
    converged: bool
    seconds: float
    extra: dict = dc_field(default_factory=dict)


@dataclass
class StudyResult:
    rows: list
    config: dict

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([
                format(float(v), ".17g")
                for v in (r.control, r.L2, r.Linf, r.norm, r.kkt, r.violation)
            ] + [str(int(r.converged)), str(int(round(r.seconds)))]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "rows": [
                {
                    "control": r.control, "L2": r.L2, "Linf": r.Linf,
                    "norm": r.norm, "kkt": r.kkt, "violation": r.violation,
                    "converged": r.converged, "seconds": r.seconds,
                    **r.extra,
                }
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _make_row(control, sol: RecoverySolution, spec: StudySpec, seconds, extra=None):
    l2, linf = error_metrics(sol, spec.case.u_star, spec.case.domain, spec.eval_grid)
    return StudyRow(
        control=float(control), L2=l2, Linf=linf,
        norm=sol.report.objective,
        kkt=sol.report.final_stationarity,
        violation=sol.report.final_constraint_violation,
        converged=sol.report.converged, seconds=seconds,
        extra=dict(extra or {}),
    )


def study_vary_N(spec: StudySpec) -> StudyResult:
    """Sweep the number of measurements with everything else fixed."""
    rows = []
    M = int(spec.fixed.get("M", 16))
    for N in spec.sweep:
        t0 = time.perf_counter()
        problem = assemble_case(spec.case, spec.formulation, int(N), M,
                                spec.kernel, c_hat=spec.fixed.get("c_hat"))
        sol = solve_formulation(problem, spec.formulation, spec.solver)
        rows.append(_make_row(N, sol, spec, time.perf_counter() - t0))
    return StudyResult(rows=rows, config={"parameter": "N", "sweep": list(spec.sweep)})


def study_vary_mu(spec: StudySpec) -> StudyResult:
    """Sweep the regularization weight; records the distance to the
    minimum-norm equality solution on the same basis."""
    if spec.formulation != "Regularized":
        raise InputError("study_vary_mu requires the Regularized formulation")
    N = int(spec.fixed.get("N", 20))
    problem = assemble_case(spec.case, "NOR_points", N, kernel=spec.kernel)
    ref = solve_min_norm_equality(problem, spec.solver)
    K = problem.gram.entries
    rows = []
    for mu in spec.sweep:
        t0 = time.perf_counter()
        cfg = SolverConfig(**{**_cfg_dict(spec.solver), "mu": float(mu)})
        sol = solve_regularized(problem, cfg)
        delta = sol.fn.coeffs - ref.fn.coeffs
        dist = math.sqrt(max(float(delta @ K @ delta), 0.0))
        rows.append(_make_row(mu, sol, spec, time.perf_counter() - t0, extra={
            "distance_to_reference": dist,
            "reference_norm": ref.report.objective,
        }))
    return StudyResult(rows=rows, config={"parameter": "mu", "sweep": list(spec.sweep),
                                          "N": N})


def study_vary_M(spec: StudySpec) -> StudyResult:
    """Sweep the point-approximation scale of a relaxed formulation; records
    the RKHS distance to a fine reference solve."""
    if spec.formulation not in ("Relaxed", "Decomposed", "MultiDomain"):
        raise InputError("study_vary_M requires a relaxed-type formulation")
    N = int(spec.fixed.get("N", 5))
    ref_M = int(spec.fixed.get("reference_M", 2 * max(spec.sweep)))
    ref_problem = assemble_case(spec.case, spec.formulation, N, ref_M, spec.kernel,
                                c_hat=spec.fixed.get("c_hat"))
    ref = solve_formulation(ref_problem, spec.formulation, spec.solver)
    rows = []
    for M in spec.sweep:
        t0 = time.perf_counter()
        problem = assemble_case(spec.case, spec.formulation, N, int(M), spec.kernel,
                                c_hat=spec.fixed.get("c_hat"))
        sol = solve_formulation(problem, spec.formulation, spec.solver)
        tol = problem.tolerances
        eps_max = float(np.max(tol[tol > 0])) if np.any(tol > 0) else 0.0
        rows.append(_make_row(M, sol, spec, time.perf_counter() - t0, extra={
            "distance_to_reference": rkhs_distance(sol.fn, ref.fn),
            "epsilon_max": eps_max,
        }))
    return StudyResult(rows=rows, config={"parameter": "M", "sweep": list(spec.sweep),
                                          "N": N, "reference_M": ref_M})


def _cfg_dict(cfg: SolverConfig) -> dict:
    return {
        "max_iters": cfg.max_iters, "tol_constraint": cfg.tol_constraint,
        "tol_stationarity": cfg.tol_stationarity, "penalty_init": cfg.penalty_init,
        "penalty_growth": cfg.penalty_growth,
        "linesearch_shrink": cfg.linesearch_shrink, "mu": cfg.mu, "seed": cfg.seed,
    }


def write_atomic(path: str, text: str):
    """Write via a temp file and atomic rename, never leaving partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
