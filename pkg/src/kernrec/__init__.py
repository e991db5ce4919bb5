"""Kernel-collocation recovery of nonlinear equations from finitely many
measurements: minimum-norm, regularized and tolerance-relaxed solvers over a
reproducing-kernel solution space, plus a manufactured-solution study harness.
"""

from .errors import CapabilityError, ConditioningError, InputError
from .kernels import (
    CompositeFunctional,
    GramMatrix,
    KernelSpec,
    OperatorFunctional,
    OperatorTag,
    RkhsFunction,
    apply_operators,
    eval_kernel,
    gradient,
    gram,
    gram_entries,
    identity,
    neg_laplacian,
    normal_derivative,
    pair_matrix,
    rkhs_distance,
    rkhs_eval,
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
    PointApproximation,
    Probe,
    Quadrature,
    approximate_test_function,
    boundary_quadrature,
    constant_field,
    default_probes,
    epsilon_schedule,
    estimate_dual_error,
    gauss_legendre,
    midpoint,
    pair_data,
    reference_quadrature,
)
from .problem import (
    Constraint,
    DecomposedOp,
    MultiDomainOp,
    NonlinearTerm,
    PointwiseOp,
    RecoveryProblem,
    Region,
    Subdomain,
    assemble_decomposed_problem,
    assemble_multidomain_problem,
    assemble_point_problem,
    assemble_relaxed_problem,
    residual_and_jacobian,
)
from .solvers import (
    RecoverySolution,
    SolveReport,
    SolverConfig,
    kkt_residual,
    solve_min_norm_equality,
    solve_min_norm_inequality,
    solve_regularized,
)
from .experiments import (
    FORMULATIONS,
    ManufacturedCase,
    StudyResult,
    StudyRow,
    StudySpec,
    assemble_case,
    battery,
    default_kernel,
    error_metrics,
    fd_reference_1d,
    manufacture_rhs,
    solve_formulation,
    study_vary_M,
    study_vary_N,
    study_vary_mu,
    write_atomic,
)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
