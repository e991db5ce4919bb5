"""Manufactured cases, references, studies and CSV output."""

import json
import math
import os

import numpy as np
import pytest

from kernrec.errors import InputError
from kernrec.experiments import (
    FORMULATIONS,
    apply_pointwise,
    assemble_case,
    battery,
    cubic_reaction_op,
    default_kernel,
    error_metrics,
    fd_reference_1d,
    manufacture_rhs,
    sine_1d,
    solve_formulation,
    StudySpec,
    study_vary_M,
    study_vary_mu,
    study_vary_N,
    write_atomic,
)
from kernrec.measurements import midpoint
from kernrec.solvers import SolverConfig

CFG = SolverConfig()
CASES = battery()


def test_battery_contains_expected_cases():
    assert set(CASES) == {
        "linear_poisson_1d",
        "cubic_dirichlet_1d",
        "cubic_dirichlet_2d",
        "cubic_decomposed_1d",
        "cubic_robin_1d",
    }


def test_manufactured_rhs_matches_operator():
    case = CASES["cubic_dirichlet_1d"]
    X = case.domain.interior_grid(17)
    lhs = apply_pointwise(cubic_reaction_op(), case.u_star, X)
    rhs = case.f(X)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_manufacture_rhs_for_custom_field():
    u = sine_1d()
    f = manufacture_rhs(u, cubic_reaction_op())
    X = np.linspace(0.05, 0.95, 11)[:, None]
    want = np.pi**2 * np.sin(np.pi * X[:, 0]) + np.sin(np.pi * X[:, 0]) ** 3
    assert np.allclose(f(X), want, rtol=1e-10)


def test_fd_reference_matches_manufactured_solution():
    case = CASES["cubic_dirichlet_1d"]
    ref = fd_reference_1d(case, cells=2000)
    X = np.linspace(0.01, 0.99, 50)[:, None]
    assert np.max(np.abs(ref(X) - case.u_star(X))) < 1e-5


def test_fd_reference_robin_case():
    case = CASES["cubic_robin_1d"]
    ref = fd_reference_1d(case, cells=4000)
    X = np.linspace(0.0, 1.0, 50)[:, None]
    assert np.max(np.abs(ref(X) - case.u_star(X))) < 1e-4


@pytest.mark.parametrize("formulation", ["NOR_points", "Regularized"])
def test_collocation_formulations_recover_solution(formulation):
    case = CASES["cubic_dirichlet_1d"]
    prob = assemble_case(case, formulation, N=20, kernel=default_kernel(1))
    sol = solve_formulation(prob, formulation, CFG)
    assert sol.report.converged
    l2, linf = error_metrics(sol, case.u_star, case.domain)
    assert l2 < 5e-2


def test_two_dimensional_case_recovers_solution():
    case = CASES["cubic_dirichlet_2d"]
    prob = assemble_case(case, "NOR_points", N=5, kernel=default_kernel(2))
    sol = solve_formulation(prob, "NOR_points", CFG)
    assert sol.report.converged
    rule = midpoint(case.domain, 50)
    from kernrec.kernels import identity, rkhs_eval_grid
    diff = rkhs_eval_grid(sol.fn, identity(), rule.nodes) - case.u_star(rule.nodes)
    l2 = math.sqrt(float(np.sum(rule.weights * diff * diff)))
    assert l2 < 5e-2


def test_unknown_formulation_rejected():
    with pytest.raises(InputError):
        assemble_case(CASES["cubic_dirichlet_1d"], "Collocation", N=5)
    with pytest.raises(InputError):
        assemble_case(CASES["cubic_dirichlet_1d"], "NOR_points", N=5,
                      kernel=default_kernel(2))


def test_study_vary_N_error_decreases():
    spec = StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="NOR_points",
                     sweep=(5, 10, 20), kernel=default_kernel(1), solver=CFG,
                     fixed={})
    res = study_vary_N(spec)
    l2 = [r.L2 for r in res.rows]
    assert all(r.converged for r in res.rows)
    assert l2[-1] < l2[0]


def test_study_vary_mu_distance_decreases():
    spec = StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="Regularized",
                     sweep=(1e2, 1e4, 1e6), kernel=default_kernel(1), solver=CFG,
                     fixed={"N": 8})
    res = study_vary_mu(spec)
    d = [r.extra["distance_to_reference"] for r in res.rows]
    assert all(b < a for a, b in zip(d, d[1:]))


def test_study_vary_M_epsilon_decreases():
    spec = StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="Relaxed",
                     sweep=(8, 16), kernel=default_kernel(1), solver=CFG,
                     fixed={"N": 3})
    res = study_vary_M(spec)
    eps = [r.extra["epsilon_max"] for r in res.rows]
    assert eps[1] < eps[0]


def test_study_sweep_validation():
    with pytest.raises(InputError):
        StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="NOR_points",
                  sweep=(), kernel=default_kernel(1), solver=CFG)
    with pytest.raises(InputError):
        StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="NOR_points",
                  sweep=(10, 5), kernel=default_kernel(1), solver=CFG)
    with pytest.raises(InputError):
        study_vary_mu(StudySpec(case=CASES["cubic_dirichlet_1d"],
                                formulation="NOR_points", sweep=(1e2,),
                                kernel=default_kernel(1), solver=CFG))


def test_csv_format(tmp_path):
    spec = StudySpec(case=CASES["cubic_dirichlet_1d"], formulation="NOR_points",
                     sweep=(5, 10), kernel=default_kernel(1), solver=CFG, fixed={})
    res = study_vary_N(spec)
    text = res.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "control,L2,Linf,norm,kkt,violation,converged,seconds"
    assert len(lines) == 3
    for line in lines[1:]:
        parts = line.split(",")
        assert len(parts) == 8
        [float(p) for p in parts]  # all numeric
        assert parts[6] in ("0", "1")
        assert parts[7] == str(int(parts[7]))  # integer seconds
    doc = json.loads(res.to_json())
    assert "rows" in doc and "config" in doc
    assert len(doc["rows"]) == 2


def test_write_atomic_round_trip(tmp_path):
    path = os.path.join(tmp_path, "out.csv")
    write_atomic(path, "hello\n")
    with open(path) as fh:
        assert fh.read() == "hello\n"
    write_atomic(path, "replaced\n")
    with open(path) as fh:
        assert fh.read() == "replaced\n"


def test_formulations_tuple_stable():
    assert FORMULATIONS == ("NOR_points", "Relaxed", "Decomposed",
                            "MultiDomain", "Regularized")
