"""Test functions, quadrature pairings and point-evaluation approximations.

Measurements of a field f against a test function phi are duality pairings
[f, phi] = integral of f*phi, evaluated by composite Gauss-Legendre
quadrature.  Test functions can in turn be approximated by weighted sums of
point evaluations; the quality of that approximation is tracked by a
probe-based dual-norm surrogate, which feeds the tolerance schedule of the
inequality-constrained recovery problems.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, InputError


@dataclass(frozen=True)
class Domain:
    """An axis-aligned interval or box."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(c) for c in self.lower))
        object.__setattr__(self, "upper", tuple(float(c) for c in self.upper))
        if len(self.lower) != len(self.upper):
            raise InputError("lower/upper length mismatch")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise InputError("upper must exceed lower")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def measure(self) -> float:
        return float(np.prod([u - l for l, u in zip(self.lower, self.upper)]))

    def contains(self, x, tol: float = 1e-12) -> bool:
        return all(
            l - tol <= xi <= u + tol for xi, l, u in zip(x, self.lower, self.upper)
        )

    def on_boundary(self, x, tol: float = 1e-12) -> bool:
        return self.contains(x, tol) and any(
            abs(xi - l) <= tol or abs(xi - u) <= tol
            for xi, l, u in zip(x, self.lower, self.upper)
        )

    def interior_grid(self, n_per_axis: int) -> np.ndarray:
        """Uniform interior points, n_per_axis per axis, excluding the boundary."""
        axes = [
            l + (u - l) * np.arange(1, n_per_axis + 1) / (n_per_axis + 1)
            for l, u in zip(self.lower, self.upper)
        ]
        if self.dim == 1:
            return axes[0][:, None]
        xx, yy = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def boundary_points(self, n_per_edge: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Boundary points and outward unit normals.

        1D: the two endpoints.  2D: corners plus n_per_edge points per edge.
        """
        if self.dim == 1:
            pts = np.array([[self.lower[0]], [self.upper[0]]])
            normals = np.array([[-1.0], [1.0]])
            return pts, normals
        (lx, ly), (ux, uy) = self.lower, self.upper
        pts, normals = [], []
        ts = np.linspace(0.0, 1.0, n_per_edge + 2)
        for t in ts:
            pts.append([lx + t * (ux - lx), ly]); normals.append([0.0, -1.0])
            pts.append([lx + t * (ux - lx), uy]); normals.append([0.0, 1.0])
        for t in ts[1:-1]:
            pts.append([lx, ly + t * (uy - ly)]); normals.append([-1.0, 0.0])
            pts.append([ux, ly + t * (uy - ly)]); normals.append([1.0, 0.0])
        return np.asarray(pts), np.asarray(normals)


@dataclass(frozen=True)
class Field:
    """A scalar field handle with optional derivatives, vectorized over (k, d)
    point arrays."""

    value: callable
    grad: callable | None = None
    lap: callable | None = None

    def __call__(self, X) -> np.ndarray:
        return np.asarray(self.value(np.atleast_2d(np.asarray(X, dtype=float))))


def constant_field(c: float) -> Field:
    return Field(
        value=lambda X: np.full(X.shape[0], float(c)),
        grad=lambda X: np.zeros_like(X),
        lap=lambda X: np.zeros(X.shape[0]),
    )


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class FourierSine:
    """Product-of-sines mode on an interval or box; vanishes on the boundary."""

    domain: Domain
    modes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        if len(self.modes) != self.domain.dim:
            raise InputError("one mode index per dimension required")
        if any(m < 1 for m in self.modes):
            raise InputError("mode indices must be >= 1")

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.ones(X.shape[0])
        for i, (m, l, u) in enumerate(zip(self.modes, self.domain.lower, self.domain.upper)):
            out *= np.sin(m * np.pi * (X[:, i] - l) / (u - l))
        return out

    def grad(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        factors = []
        dfactors = []
        for i, (m, l, u) in enumerate(zip(self.modes, self.domain.lower, self.domain.upper)):
            w = m * np.pi / (u - l)
            arg = w * (X[:, i] - l)
            factors.append(np.sin(arg))
            dfactors.append(w * np.cos(arg))
        out = np.zeros_like(X)
        for i in range(self.domain.dim):
            col = dfactors[i].copy()
            for j in range(self.domain.dim):
                if j != i:
                    col *= factors[j]
            out[:, i] = col
        return out

    def breakpoints(self):
        return ()


@dataclass(frozen=True)
class HatFunction:
    """1D piecewise-linear hat with nodes (left, center, right), value 1 at
    center.  left == center or right == center gives a boundary half-hat."""

    domain: Domain
    left: float
    center: float
    right: float

    def __post_init__(self):
        if self.domain.dim != 1:
            raise CapabilityError("hat test functions are 1D only")
        lo, hi = self.domain.lower[0], self.domain.upper[0]
        if not (lo - 1e-12 <= self.left <= self.center <= self.right <= hi + 1e-12):
            raise InputError("hat nodes must be ordered within the domain")
        if self.left == self.center == self.right:
            raise InputError("degenerate hat")

    def value(self, X) -> np.ndarray:
        x = np.atleast_2d(np.asarray(X, dtype=float))[:, 0]
        out = np.zeros_like(x)
        if self.center > self.left:
            m = (x >= self.left) & (x <= self.center)
            out[m] = (x[m] - self.left) / (self.center - self.left)
        else:
            out[np.isclose(x, self.center)] = 1.0
        if self.right > self.center:
            m = (x > self.center) & (x <= self.right)
            out[m] = (self.right - x[m]) / (self.right - self.center)
        return out

    def grad(self, X) -> np.ndarray:
        x = np.atleast_2d(np.asarray(X, dtype=float))[:, 0]
        out = np.zeros_like(x)
        if self.center > self.left:
            m = (x >= self.left) & (x < self.center)
            out[m] = 1.0 / (self.center - self.left)
        if self.right > self.center:
            m = (x >= self.center) & (x <= self.right)
            out[m] = -1.0 / (self.right - self.center)
        return out[:, None]

    def breakpoints(self):
        return (self.left, self.center, self.right)


@dataclass(frozen=True)
class DiracPoint:
    """Point evaluation at a fixed location of the closed domain."""

    domain: Domain
    point: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "point", tuple(float(c) for c in self.point))
        if not self.domain.contains(self.point):
            raise InputError("dirac point must lie in the closed domain")

    def breakpoints(self):
        return ()


TestFunction = FourierSine | HatFunction | DiracPoint


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class Quadrature:
    """Nodes and weights of an integration rule."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.atleast_2d(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.nodes.shape[0] != self.weights.shape[0]:
            raise InputError("node/weight count mismatch")


def _gl_cells_1d(lo: float, hi: float, edges: np.ndarray, order: int):
    ref_x, ref_w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        h = b - a
        nodes.append(a + 0.5 * h * (ref_x + 1.0))
        weights.append(0.5 * h * ref_w)
    return np.concatenate(nodes), np.concatenate(weights)


def gauss_legendre(domain: Domain, ncells: int, order: int = 5,
                   breakpoints=()) -> Quadrature:
    """Composite Gauss-Legendre rule; cell edges include any breakpoints so
    piecewise-smooth integrands are handled exactly per piece."""
    if ncells < 1:
        raise InputError("ncells must be >= 1")
    if domain.dim == 1:
        lo, hi = domain.lower[0], domain.upper[0]
        edges = np.linspace(lo, hi, ncells + 1)
        if breakpoints:
            edges = np.unique(np.concatenate([edges, np.asarray(breakpoints, float)]))
        x, w = _gl_cells_1d(lo, hi, edges, order)
        return Quadrature(x[:, None], w)
    x0, w0 = _gl_cells_1d(domain.lower[0], domain.upper[0],
                          np.linspace(domain.lower[0], domain.upper[0], ncells + 1), order)
    x1, w1 = _gl_cells_1d(domain.lower[1], domain.upper[1],
                          np.linspace(domain.lower[1], domain.upper[1], ncells + 1), order)
    xx, yy = np.meshgrid(x0, x1, indexing="ij")
    ww = np.outer(w0, w1)
    return Quadrature(np.column_stack([xx.ravel(), yy.ravel()]), ww.ravel())


def midpoint(domain: Domain, n: int) -> Quadrature:
    """Midpoint rule with n nodes (1D) or the nearest square grid (2D)."""
    if n < 1:
        raise InputError("node count must be >= 1")
    if domain.dim == 1:
        lo, hi = domain.lower[0], domain.upper[0]
        h = (hi - lo) / n
        x = lo + h * (np.arange(n) + 0.5)
        return Quadrature(x[:, None], np.full(n, h))
    side = max(1, round(math.sqrt(n)))
    axes, steps = [], []
    for l, u in zip(domain.lower, domain.upper):
        h = (u - l) / side
        axes.append(l + h * (np.arange(side) + 0.5))
        steps.append(h)
    xx, yy = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    return Quadrature(pts, np.full(pts.shape[0], steps[0] * steps[1]))


def boundary_quadrature(domain: Domain, n_per_edge: int = 32) -> Quadrature:
    """Surface rule on the domain boundary: two unit-weight points in 1D,
    composite Gauss-Legendre along each edge in 2D."""
    if domain.dim == 1:
        return Quadrature(
            np.array([[domain.lower[0]], [domain.upper[0]]]), np.array([1.0, 1.0])
        )
    (lx, ly), (ux, uy) = domain.lower, domain.upper
    nodes, weights = [], []
    tx, wx = _gl_cells_1d(lx, ux, np.linspace(lx, ux, n_per_edge + 1), 5)
    ty, wy = _gl_cells_1d(ly, uy, np.linspace(ly, uy, n_per_edge + 1), 5)
    for yv in (ly, uy):
        nodes.append(np.column_stack([tx, np.full_like(tx, yv)]))
        weights.append(wx)
    for xv in (lx, ux):
        nodes.append(np.column_stack([np.full_like(ty, xv), ty]))
        weights.append(wy)
    return Quadrature(np.vstack(nodes), np.concatenate(weights))


def reference_quadrature(phi: TestFunction, ncells: int = 256) -> Quadrature:
    """A fine rule suitable for integrating against phi (aligned with its
    kinks)."""
    return gauss_legendre(phi.domain, ncells, breakpoints=phi.breakpoints())


# ---------------------------------------------------------------------------
# pairings and point approximations


def pair_data(f: Field, phi: TestFunction, quad: Quadrature) -> float:
    """Duality pairing [f, phi]: a quadrature integral of f*phi, or f at the
    point for a Dirac test function (the rule is ignored)."""
    if isinstance(phi, DiracPoint):
        return float(f(np.asarray([phi.point]))[0])
    return float(np.sum(quad.weights * f(quad.nodes) * phi.value(quad.nodes)))


@dataclass(frozen=True)
class PointApproximation:
    """Weighted point evaluations approximating a test function, with a
    dual-norm error surrogate."""

    points: np.ndarray
    coeffs: np.ndarray
    dual_error_estimate: float

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        if self.points.shape[0] != self.coeffs.shape[0]:
            raise InputError("point/coefficient count mismatch")
        if self.dual_error_estimate < 0:
            raise InputError("dual error estimate must be nonnegative")


@dataclass(frozen=True)
class Probe:
    """A smooth field with a precomputed Sobolev-type norm surrogate."""

    field: Field
    norm: float


def _probe_h1_norm(f: Field, domain: Domain) -> float:
    quad = gauss_legendre(domain, 64)
    v = f(quad.nodes)
    sq = np.sum(quad.weights * v * v)
    g = np.asarray(f.grad(quad.nodes))
    sq += np.sum(quad.weights * np.sum(g * g, axis=1))
    return math.sqrt(sq)


def default_probes(domain: Domain) -> list[Probe]:
    """A fixed 20-element dictionary of smooth fields on the domain, used as
    the dual-norm surrogate probe set."""
    fields: list[Field] = []
    lo = np.asarray(domain.lower)
    span = np.asarray(domain.upper) - lo
    if domain.dim == 1:
        for k in range(1, 9):
            w = k * np.pi / span[0]
            fields.append(Field(
                value=lambda X, w=w, l=lo[0]: np.sin(w * (X[:, 0] - l)),
                grad=lambda X, w=w, l=lo[0]: (w * np.cos(w * (X[:, 0] - l)))[:, None],
            ))
            fields.append(Field(
                value=lambda X, w=w, l=lo[0]: np.cos(w * (X[:, 0] - l)),
                grad=lambda X, w=w, l=lo[0]: (-w * np.sin(w * (X[:, 0] - l)))[:, None],
            ))
        for p in range(4):
            fields.append(Field(
                value=lambda X, p=p, l=lo[0], s=span[0]: ((X[:, 0] - l) / s) ** p,
                grad=lambda X, p=p, l=lo[0], s=span[0]: (
                    (p / s) * ((X[:, 0] - l) / s) ** max(p - 1, 0) if p else np.zeros_like(X[:, 0])
                )[:, None],
            ))
    else:
        def trig2(fi, fj, dfi, dfj, wi, wj):
            return Field(
                value=lambda X: fi(wi * (X[:, 0] - lo[0])) * fj(wj * (X[:, 1] - lo[1])),
                grad=lambda X: np.column_stack([
                    wi * dfi(wi * (X[:, 0] - lo[0])) * fj(wj * (X[:, 1] - lo[1])),
                    wj * fi(wi * (X[:, 0] - lo[0])) * dfj(wj * (X[:, 1] - lo[1])),
                ]),
            )
        sin, cos = np.sin, np.cos
        for ki in range(1, 4):
            for kj in range(1, 4):
                wi, wj = ki * np.pi / span[0], kj * np.pi / span[1]
                fields.append(trig2(sin, sin, cos, lambda t: cos(t), wi, wj))
                fields.append(trig2(cos, cos, lambda t: -sin(t), lambda t: -sin(t), wi, wj))
        fields.append(constant_field(1.0))
        fields.append(Field(
            value=lambda X: (X[:, 0] - lo[0]) * (X[:, 1] - lo[1]) / (span[0] * span[1]),
            grad=lambda X: np.column_stack([
                (X[:, 1] - lo[1]) / (span[0] * span[1]),
                (X[:, 0] - lo[0]) / (span[0] * span[1]),
            ]),
        ))
    fields = fields[:20]
    return [Probe(f, _probe_h1_norm(f, domain)) for f in fields]


def estimate_dual_error(approx: PointApproximation, phi: TestFunction,
                        probes: list[Probe]) -> float:
    """Probe-set surrogate for the dual-norm distance between a point
    approximation and the test function it approximates."""
    if not probes:
        raise InputError("probe set must be nonempty")
    quad = reference_quadrature(phi)
    worst = 0.0
    for probe in probes:
        if probe.norm == 0.0:
            raise InputError("probe with zero norm surrogate")
        approx_val = float(approx.coeffs @ probe.field(approx.points))
        exact_val = pair_data(probe.field, phi, quad)
        worst = max(worst, abs(approx_val - exact_val) / probe.norm)
    return worst


def approximate_test_function(phi: TestFunction, M: int,
                              probes: list[Probe] | None = None) -> PointApproximation:
    """Approximate phi by M weighted point evaluations (midpoint-rule nodes
    with coefficients w_m * phi(x_m)); a Dirac is its own exact approximation."""
    if M < 1:
        raise InputError("M must be >= 1")
    if isinstance(phi, DiracPoint):
        return PointApproximation(
            points=np.asarray([phi.point]), coeffs=np.asarray([1.0]),
            dual_error_estimate=0.0,
        )
    rule = midpoint(phi.domain, M)
    coeffs = rule.weights * phi.value(rule.nodes)
    approx = PointApproximation(points=rule.nodes, coeffs=coeffs, dual_error_estimate=0.0)
    if probes is None:
        probes = default_probes(phi.domain)
    err = estimate_dual_error(approx, phi, probes)
    return PointApproximation(points=rule.nodes, coeffs=coeffs, dual_error_estimate=err)


def epsilon_schedule(dual_error: float, C_hat: float) -> float:
    """Constraint tolerance from a dual-error estimate and a bound on the
    operator magnitude."""
    if not C_hat > 0:
        raise InputError("C_hat must be positive")
    if dual_error < 0:
        raise InputError("dual_error must be nonnegative")
    return C_hat * dual_error


@dataclass(frozen=True)
class MeasurementTarget:
    """One measurement: test function, pairing value, tolerance and (for
    relaxed problems) the point approximation of the test function."""

    test_fn: TestFunction
    target: float
    tolerance: float = 0.0
    point_approx: PointApproximation | None = None

    def __post_init__(self):
        if self.tolerance < 0:
            raise InputError("tolerance must be nonnegative")
