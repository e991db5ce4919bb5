"""Reproducing-kernel evaluation, operator-applied kernel derivatives and Gram assembly.

The solution space is realized as an RKHS with a smooth radial kernel
(Gaussian or inverse multiquadric).  Linear operators (identity, negative
Laplacian, directional/normal derivatives, gradient components) can be
applied to either kernel argument; the resulting cross-applications are the
pairwise inner products of Riesz representers and populate the Gram matrix
used by every solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import CapabilityError, ConditioningError, InputError

GAUSSIAN = "gaussian"
INVERSE_MULTIQUADRIC = "inverse_multiquadric"
_FAMILIES = (GAUSSIAN, INVERSE_MULTIQUADRIC)


@dataclass(frozen=True)
class KernelSpec:
    """A radial kernel family with hyperparameters, fixing the solution space."""

    family: str
    lengthscale: float
    amplitude: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise InputError("lengthscale must be positive")
        if not self.amplitude > 0:
            raise InputError("amplitude must be positive")
        if self.dim not in (1, 2):
            raise InputError("dim must be 1 or 2")


@dataclass(frozen=True)
class OperatorTag:
    """A linear operator applied to one kernel argument.

    kind is one of 'identity', 'neg_laplacian', 'normal_derivative',
    'gradient'.  normal_derivative carries a unit direction vector;
    gradient carries a component index.
    """

    kind: str
    normal: tuple[float, ...] | None = None
    component: int | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "neg_laplacian", "normal_derivative", "gradient"):
            raise InputError(f"unknown operator kind {self.kind!r}")
        if self.kind == "normal_derivative":
            if self.normal is None:
                raise InputError("normal_derivative requires a direction")
            nrm = math.sqrt(sum(c * c for c in self.normal))
            if abs(nrm - 1.0) > 1e-12:
                raise InputError("normal direction must have unit norm")
        if self.kind == "gradient" and self.component is None:
            raise InputError("gradient requires a component index")


def identity() -> OperatorTag:
    return OperatorTag("identity")


def neg_laplacian() -> OperatorTag:
    return OperatorTag("neg_laplacian")


def normal_derivative(normal) -> OperatorTag:
    return OperatorTag("normal_derivative", normal=tuple(float(c) for c in normal))


def gradient(component: int) -> OperatorTag:
    return OperatorTag("gradient", component=int(component))


@dataclass(frozen=True)
class OperatorFunctional:
    """Apply op, then evaluate at a point: the index of one Riesz representer."""

    op: OperatorTag
    point: tuple[float, ...]
    domain_tag: int = 0

    def __post_init__(self):
        object.__setattr__(self, "point", tuple(float(c) for c in self.point))
        if self.domain_tag < 0:
            raise InputError("domain_tag must be nonnegative")

    def groups(self):
        return [(self.op, np.asarray([self.point]), np.asarray([1.0]))]


@dataclass(frozen=True)
class CompositeFunctional:
    """A weighted sum of operator functionals (e.g. a quadrature-discretized
    weak pairing).  Its representer is the same weighted sum of kernel
    sections."""

    parts: tuple[tuple[float, OperatorFunctional], ...]
    domain_tag: int = 0

    def __post_init__(self):
        if not self.parts:
            raise InputError("composite functional needs at least one part")

    def groups(self):
        by_op: dict[OperatorTag, tuple[list, list]] = {}
        for w, fnl in self.parts:
            pts, wts = by_op.setdefault(fnl.op, ([], []))
            pts.append(fnl.point)
            wts.append(w)
        return [(op, np.asarray(p), np.asarray(w)) for op, (p, w) in by_op.items()]


def _radial_derivatives(spec: KernelSpec, s: np.ndarray):
    """Derivatives g, g', g'', g''', g'''' of the radial profile g(s) with
    s = ||x - y||^2."""
    a = spec.amplitude
    l2 = spec.lengthscale**2
    if spec.family == GAUSSIAN:
        b = 0.5 / l2
        e = a * np.exp(-b * s)
        return e, -b * e, b * b * e, -(b**3) * e, b**4 * e
    if spec.family == INVERSE_MULTIQUADRIC:
        t = 1.0 + s / l2
        g0 = a * t**-0.5
        g1 = -0.5 * a / l2 * t**-1.5
        g2 = 0.75 * a / l2**2 * t**-2.5
        g3 = -1.875 * a / l2**3 * t**-3.5
        g4 = 6.5625 * a / l2**4 * t**-4.5
        return g0, g1, g2, g3, g4
    raise CapabilityError(f"kernel family {spec.family!r} has no derivative table")


def _expand(op: OperatorTag, dim: int):
    """Split an operator into elementary (coefficient, kind, component) terms,
    kind in {'I', 'G', 'L'}."""
    if op.kind == "identity":
        return [(1.0, "I", 0)]
    if op.kind == "neg_laplacian":
        return [(1.0, "L", 0)]
    if op.kind == "gradient":
        if op.component >= dim:
            raise CapabilityError("gradient component exceeds dimension")
        return [(1.0, "G", op.component)]
    if op.kind == "normal_derivative":
        if len(op.normal) != dim:
            raise InputError("normal direction length must equal dim")
        return [(c, "G", i) for i, c in enumerate(op.normal) if c != 0.0]
    raise CapabilityError(f"operator kind {op.kind!r} not supported")


def _elementary(kl, i, kr, j, D, S, g, dim):
    """Cross-application of elementary operators to a radial kernel.

    kl acts on the first argument, kr on the second; D = x - y, S = |D|^2.
    Closed forms in terms of the radial derivatives g = (g0..g4).
    """
    g0, g1, g2, g3, g4 = g
    if kl == "I" and kr == "I":
        return g0
    if kl == "G" and kr == "I":
        return 2.0 * g1 * D[..., i]
    if kl == "I" and kr == "G":
        return -2.0 * g1 * D[..., j]
    if kl == "G" and kr == "G":
        out = -4.0 * g2 * D[..., i] * D[..., j]
        if i == j:
            out = out - 2.0 * g1
        return out
    if (kl == "L" and kr == "I") or (kl == "I" and kr == "L"):
        return -(4.0 * S * g2 + 2.0 * dim * g1)
    if kl == "L" and kr == "G":
        return D[..., j] * ((8.0 + 4.0 * dim) * g2 + 8.0 * S * g3)
    if kl == "G" and kr == "L":
        return -D[..., i] * ((8.0 + 4.0 * dim) * g2 + 8.0 * S * g3)
    if kl == "L" and kr == "L":
        return 4.0 * S * ((8.0 + 2.0 * dim) * g3 + 4.0 * S * g4) + 2.0 * dim * (
            (4.0 + 2.0 * dim) * g2 + 4.0 * S * g3
        )
    raise CapabilityError(f"unsupported elementary pair ({kl}, {kr})")


def pair_matrix(spec: KernelSpec, opL: OperatorTag, opR: OperatorTag, X, Y) -> np.ndarray:
    """Matrix of (L_opL in the first argument, L_opR in the second) of k,
    over all point pairs from X (rows) and Y (columns)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != spec.dim or Y.shape[1] != spec.dim:
        raise InputError("point dimension does not match kernel dim")
    D = X[:, None, :] - Y[None, :, :]
    S = np.einsum("nmi,nmi->nm", D, D)
    g = _radial_derivatives(spec, S)
    out = np.zeros(S.shape)
    for cl, kl, i in _expand(opL, spec.dim):
        for cr, kr, j in _expand(opR, spec.dim):
            out += cl * cr * _elementary(kl, i, kr, j, D, S, g, spec.dim)
    return out


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Plain kernel value k(x, y)."""
    return float(pair_matrix(spec, identity(), identity(), [x], [y])[0, 0])


def apply_operators(spec: KernelSpec, opL: OperatorTag, opR: OperatorTag, x, y) -> float:
    """Scalar cross-application of two operators to the kernel at (x, y)."""
    return float(pair_matrix(spec, opL, opR, [x], [y])[0, 0])


def _functional_cross(spec, fa, fb) -> float:
    total = 0.0
    for opA, PA, wA in fa.groups():
        for opB, PB, wB in fb.groups():
            total += float(wA @ pair_matrix(spec, opA, opB, PA, PB) @ wB)
    return total


def gram_entries(spec: KernelSpec, basis) -> np.ndarray:
    """Symmetrized matrix of pairwise representer inner products (no nugget,
    no factorization)."""
    if not basis:
        raise InputError("basis must be nonempty")
    n = len(basis)
    K = np.zeros((n, n))
    # fast path: atomic functionals grouped by operator, block evaluation
    atomic: dict[OperatorTag, tuple[list, list]] = {}
    composite = []
    for idx, fnl in enumerate(basis):
        if isinstance(fnl, OperatorFunctional):
            idxs, pts = atomic.setdefault(fnl.op, ([], []))
            idxs.append(idx)
            pts.append(fnl.point)
        else:
            composite.append(idx)
    keys = list(atomic)
    for a, opA in enumerate(keys):
        ia, pa = atomic[opA]
        PA = np.asarray(pa)
        for opB in keys[a:]:
            ib, pb = atomic[opB]
            block = pair_matrix(spec, opA, opB, PA, np.asarray(pb))
            K[np.ix_(ia, ib)] = block
            K[np.ix_(ib, ia)] = block.T
    for i in composite:
        for j in range(n):
            v = _functional_cross(spec, basis[i], basis[j])
            K[i, j] = v
            K[j, i] = v
    return 0.5 * (K + K.T)


@dataclass
class GramMatrix:
    """Dense symmetric Gram matrix with nugget and cached SPD factorization."""

    entries: np.ndarray
    nugget: float
    factorization: tuple = field(repr=False)

    @property
    def matrix(self) -> np.ndarray:
        return self.entries + self.nugget * np.eye(self.entries.shape[0])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.factorization, rhs)


def default_nugget(entries: np.ndarray) -> float:
    return 1e-10 * np.trace(entries) / entries.shape[0]


def gram(spec: KernelSpec, basis, nugget: float | None = None) -> GramMatrix:
    """Assemble and factor the Gram matrix of a representer basis.

    The factorization is retried with a 10x larger nugget up to 3 times
    before raising a conditioning error.
    """
    K = gram_entries(spec, basis)
    if nugget is None:
        nugget = default_nugget(K)
    if nugget < 0:
        raise InputError("nugget must be nonnegative")
    trial = nugget
    for attempt in range(4):
        try:
            factor = scipy.linalg.cho_factor(
                K + trial * np.eye(K.shape[0]), lower=True
            )
            return GramMatrix(entries=K, nugget=trial, factorization=factor)
        except scipy.linalg.LinAlgError:
            base = default_nugget(K) if trial == 0.0 else trial
            trial = base * 10.0
    smallest = float(np.linalg.eigvalsh(K)[0])
    raise ConditioningError(
        f"Gram factorization failed; smallest eigenvalue {smallest:.3e}"
    )


@dataclass
class RkhsFunction:
    """A finite kernel combination: coefficients over a representer basis."""

    basis: tuple
    coeffs: np.ndarray
    kernel: KernelSpec

    def __post_init__(self):
        self.basis = tuple(self.basis)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if len(self.coeffs) != len(self.basis):
            raise InputError("coefficient length must match basis length")


def rkhs_eval_grid(fn: RkhsFunction, probe_op: OperatorTag, X) -> np.ndarray:
    """(probe_op u)(x) over a grid of points X, vectorized."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    for lam, fnl in zip(fn.coeffs, fn.basis):
        if lam == 0.0:
            continue
        for op, P, w in fnl.groups():
            out += lam * (pair_matrix(fn.kernel, probe_op, op, X, P) @ w)
    return out


def rkhs_eval(fn: RkhsFunction, probe_op: OperatorTag, x) -> float:
    return float(rkhs_eval_grid(fn, probe_op, [x])[0])


def rkhs_norm(fn: RkhsFunction) -> float:
    """RKHS norm sqrt(lambda' K lambda), clamped at zero against round-off."""
    if len(fn.basis) == 0:
        return 0.0
    K = gram_entries(fn.kernel, fn.basis)
    return math.sqrt(max(float(fn.coeffs @ K @ fn.coeffs), 0.0))


def rkhs_distance(a: RkhsFunction, b: RkhsFunction) -> float:
    """Norm of the difference of two kernel combinations, in the joint basis."""
    if a.kernel != b.kernel:
        raise InputError("functions live in different kernel spaces")
    joint = RkhsFunction(
        basis=tuple(a.basis) + tuple(b.basis),
        coeffs=np.concatenate([a.coeffs, -b.coeffs]),
        kernel=a.kernel,
    )
    return rkhs_norm(joint)
