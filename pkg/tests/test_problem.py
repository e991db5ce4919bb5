"""Problem assembly, residuals and Jacobians."""

import numpy as np
import pytest

from kernrec.errors import InputError
from kernrec.kernels import KernelSpec, identity, neg_laplacian
from kernrec.measurements import (
    DiracPoint,
    Domain,
    FourierSine,
    MeasurementTarget,
    approximate_test_function,
    default_probes,
    gauss_legendre,
)
from kernrec.problem import (
    DecomposedOp,
    MultiDomainOp,
    PointwiseOp,
    Region,
    Subdomain,
    assemble_decomposed_problem,
    assemble_multidomain_problem,
    assemble_point_problem,
    assemble_relaxed_problem,
    residual_and_jacobian,
    residual_vector,
)

UNIT = Domain((0.0,), (1.0,))
KERNEL = KernelSpec("gaussian", lengthscale=0.2, dim=1)


def cubic_op():
    return PointwiseOp(
        ops=(neg_laplacian(), identity()),
        F=lambda z, x: z[0] + z[1] ** 3,
        dF=lambda z, x: np.array([np.ones_like(z[0]), 3.0 * z[1] ** 2]),
        name="cubic",
    )


def scalar_cubic_op():
    # deliberately non-broadcasting to exercise the per-point fallback
    return PointwiseOp(
        ops=(neg_laplacian(), identity()),
        F=lambda z, x: float(z[0]) + float(z[1]) ** 3,
        dF=lambda z, x: [1.0, 3.0 * float(z[1]) ** 2],
        name="cubic_scalar",
    )


def test_pointwise_op_rejects_bad_partials():
    with pytest.raises(InputError):
        PointwiseOp(
            ops=(identity(),),
            F=lambda z, x: z[0] ** 2,
            dF=lambda z, x: np.array([3.0 * z[0]]),  # wrong derivative
        )


def test_point_problem_counts_and_dedup():
    pts = UNIT.interior_grid(4)
    prob = assemble_point_problem(cubic_op(), pts, np.zeros(4), KERNEL)
    assert len(prob.constraints) == 4
    # two operator tags per point, deduplicated across constraints
    assert len(prob.basis) == 8
    # repeating the same point must not grow the basis
    pts2 = np.vstack([pts, pts[:1]])
    prob2 = assemble_point_problem(cubic_op(), pts2, np.zeros(5), KERNEL)
    assert len(prob2.basis) == 8


def test_point_problem_input_validation():
    with pytest.raises(InputError):
        assemble_point_problem(cubic_op(), np.empty((0, 1)), np.empty(0), KERNEL)
    with pytest.raises(InputError):
        assemble_point_problem(cubic_op(), UNIT.interior_grid(3), np.zeros(2), KERNEL)


def test_residual_matches_manual_evaluation():
    pts = UNIT.interior_grid(3)
    targets = np.array([0.1, -0.2, 0.3])
    prob = assemble_point_problem(cubic_op(), pts, targets, KERNEL)
    n = len(prob.basis)
    rng = np.random.default_rng(0)
    lam = rng.normal(size=n) * 0.1
    K = prob.gram.entries
    z = K @ lam  # representer values of each basis functional at the solution
    r = residual_vector(prob, lam)
    for c, ri, t in zip(prob.constraints, r, targets):
        term = c.nonlinear[0]
        zi = [z[i] for i in term.z_indices]
        manual = zi[0] + zi[1] ** 3 - t
        assert ri == pytest.approx(manual, rel=1e-12, abs=1e-12)


def test_jacobian_matches_finite_differences():
    pts = UNIT.interior_grid(4)
    prob = assemble_point_problem(cubic_op(), pts, np.zeros(4), KERNEL)
    n = len(prob.basis)
    rng = np.random.default_rng(1)
    lam = rng.normal(size=n) * 0.05
    _, J = residual_and_jacobian(prob, lam)
    h = 1e-7
    for k in range(n):
        lp, lm = lam.copy(), lam.copy()
        lp[k] += h
        lm[k] -= h
        fd = (residual_vector(prob, lp) - residual_vector(prob, lm)) / (2 * h)
        assert np.allclose(J[:, k], fd, atol=1e-5), k


def test_vectorized_and_scalar_ops_agree():
    pts = UNIT.interior_grid(5)
    fast = assemble_point_problem(cubic_op(), pts, np.zeros(5), KERNEL)
    slow = assemble_point_problem(scalar_cubic_op(), pts, np.zeros(5), KERNEL)
    assert fast.constraints[0].nonlinear[0].op._vectorized
    assert not slow.constraints[0].nonlinear[0].op._vectorized
    rng = np.random.default_rng(2)
    lam = rng.normal(size=len(fast.basis)) * 0.1
    rf, Jf = residual_and_jacobian(fast, lam)
    rs, Js = residual_and_jacobian(slow, lam)
    assert np.allclose(rf, rs, rtol=1e-12, atol=1e-14)
    assert np.allclose(Jf, Js, rtol=1e-12, atol=1e-14)


def relaxed_measurements(n_sine, M):
    probes = default_probes(UNIT)
    out = []
    for k in range(1, n_sine + 1):
        phi = FourierSine(UNIT, (k,))
        approx = approximate_test_function(phi, M, probes)
        out.append(MeasurementTarget(
            test_fn=phi, target=0.1 * k,
            tolerance=max(approx.dual_error_estimate, 1e-3),
            point_approx=approx,
        ))
    return out


def test_relaxed_problem_assembly():
    meas = relaxed_measurements(3, 8)
    prob = assemble_relaxed_problem(cubic_op(), meas, KERNEL)
    assert prob.kind == "relaxed"
    assert len(prob.constraints) == 3
    assert np.all(prob.tolerances > 0)
    # each constraint aggregates M approximation points with 2 tags each,
    # shared across constraints through the common midpoint grid
    assert len(prob.basis) == 16
    with pytest.raises(InputError):
        assemble_relaxed_problem(
            cubic_op(),
            [MeasurementTarget(test_fn=FourierSine(UNIT, (1,)), target=0.0)],
            KERNEL)


def test_decomposed_problem_linear_weak_form():
    meas = relaxed_measurements(2, 8)
    op = DecomposedOp(
        linear=neg_laplacian(),
        nonlinear=PointwiseOp(
            ops=(identity(),),
            F=lambda z, x: z[0] ** 3,
            dF=lambda z, x: 3.0 * z * z,
        ),
    )
    quad = gauss_legendre(UNIT, 32)
    prob = assemble_decomposed_problem(op, meas, quad, KERNEL)
    assert len(prob.constraints) == 2
    for c in prob.constraints:
        assert len(c.linear) >= 1  # weak pairing of the principal part
        assert len(c.nonlinear) >= 1  # pointwise cubic part


def test_multidomain_single_region_matches_relaxed():
    meas = relaxed_measurements(3, 10)
    op = MultiDomainOp(subdomains=(
        Subdomain(domain_tag=0, region=Region("interior", UNIT), operator=cubic_op()),
    ))
    quad = gauss_legendre(UNIT, 32)
    probA = assemble_multidomain_problem(op, meas, quad, KERNEL)
    probB = assemble_relaxed_problem(cubic_op(), meas, KERNEL)
    assert len(probA.constraints) == len(probB.constraints)
    assert len(probA.basis) == len(probB.basis)
    lam = np.random.default_rng(3).normal(size=len(probA.basis)) * 0.1
    rA, JA = residual_and_jacobian(probA, lam)
    rB, JB = residual_and_jacobian(probB, lam)
    assert np.allclose(rA, rB, rtol=1e-12, atol=1e-14)
    assert np.allclose(JA, JB, rtol=1e-12, atol=1e-14)


def test_multidomain_routes_points_by_region():
    interior_op = cubic_op()
    trace_op = PointwiseOp(
        ops=(identity(),),
        F=lambda z, x: z[0],
        dF=lambda z, x: np.ones_like(z),
        name="trace",
    )
    probes = default_probes(UNIT)
    meas = []
    for phi in (DiracPoint(UNIT, (0.5,)), DiracPoint(UNIT, (0.0,))):
        approx = approximate_test_function(phi, 1, probes)
        meas.append(MeasurementTarget(test_fn=phi, target=0.0, tolerance=0.0,
                                      point_approx=approx))
    op = MultiDomainOp(subdomains=(
        Subdomain(0, Region("interior", UNIT), interior_op),
        Subdomain(1, Region("boundary", UNIT), trace_op),
    ))
    quad = gauss_legendre(UNIT, 16)
    prob = assemble_multidomain_problem(op, meas, quad, KERNEL)
    # interior dirac hits the cubic operator (2 tags), boundary dirac the trace
    assert len(prob.constraints) == 2
    assert len(prob.constraints[0].nonlinear[0].z_indices) == 2
    assert len(prob.constraints[1].nonlinear[0].z_indices) == 1


def test_points_region_membership():
    region = Region("points", UNIT, points=((0.0,),))
    assert region.contains((0.0,))
    assert not region.contains((0.5,))
    with pytest.raises(InputError):
        Region("points", UNIT)
    with pytest.raises(InputError):
        Region("blob", UNIT)
