"""Command-line entry points: solve, study, validate-kernel.

Configuration is a JSON document validated against a closed schema (unknown
keys are rejected with a diagnostic naming the offending field).  Exit codes:
0 on success/convergence, 1 on input errors, 2 on non-convergence or a failed
kernel validation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import jsonschema
import numpy as np

from .errors import CapabilityError, ConditioningError, InputError
from .kernels import (
    KernelSpec,
    apply_operators,
    eval_kernel,
    gradient,
    identity,
    neg_laplacian,
    normal_derivative,
)
from .solvers import SolverConfig, kkt_residual
from .experiments import (
    FORMULATIONS,
    StudySpec,
    assemble_case,
    battery,
    default_kernel,
    error_metrics,
    solve_formulation,
    study_vary_M,
    study_vary_mu,
    study_vary_N,
    write_atomic,
)

_SOLVER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "max_iters": {"type": "integer", "minimum": 1},
        "tol_constraint": {"type": "number", "exclusiveMinimum": 0},
        "tol_stationarity": {"type": "number", "exclusiveMinimum": 0},
        "penalty_init": {"type": "number", "exclusiveMinimum": 0},
        "penalty_growth": {"type": "number", "exclusiveMinimum": 1},
        "linesearch_shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "mu": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_KERNEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "family": {"enum": ["gaussian", "inverse_multiquadric"]},
        "lengthscale": {"type": "number", "exclusiveMinimum": 0},
        "amplitude": {"type": "number", "exclusiveMinimum": 0},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["case", "formulation"],
    "properties": {
        "case": {"enum": sorted(battery())},
        "formulation": {"enum": list(FORMULATIONS)},
        "N": {"type": "integer", "minimum": 1},
        "M": {"type": "integer", "minimum": 1},
        "c_hat": {"type": "number", "exclusiveMinimum": 0},
        "eval_grid": {"type": "integer", "minimum": 2},
        "kernel": _KERNEL_SCHEMA,
        "solver": _SOLVER_SCHEMA,
        "study": {
            "type": "object",
            "additionalProperties": False,
            "required": ["parameter", "sweep"],
            "properties": {
                "parameter": {"enum": ["N", "M", "mu"]},
                "sweep": {
                    "type": "array", "minItems": 1,
                    "items": {"type": "number", "exclusiveMinimum": 0},
                },
                "fixed": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "N": {"type": "integer", "minimum": 1},
                        "M": {"type": "integer", "minimum": 1},
                        "reference_M": {"type": "integer", "minimum": 1},
                        "c_hat": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
    },
}


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config field {where!r}: {exc.message}") from exc
    return doc


def _build(config: dict, seed: int | None):
    case = battery()[config["case"]]
    kdoc = config.get("kernel", {})
    base = default_kernel(case.dim)
    kernel = KernelSpec(
        family=kdoc.get("family", base.family),
        lengthscale=kdoc.get("lengthscale", base.lengthscale),
        amplitude=kdoc.get("amplitude", base.amplitude),
        dim=case.dim,
    )
    sdoc = dict(config.get("solver", {}))
    if seed is not None:
        sdoc["seed"] = seed
    solver = SolverConfig(**sdoc)
    return case, kernel, solver


def cmd_solve(config: dict, out: str | None, seed: int | None) -> int:
    case, kernel, solver = _build(config, seed)
    formulation = config["formulation"]
    problem = assemble_case(
        case, formulation, config.get("N", 10), config.get("M", 16), kernel,
        c_hat=config.get("c_hat"),
    )
    sol = solve_formulation(problem, formulation, solver)
    l2, linf = error_metrics(sol, case.u_star, case.domain,
                             config.get("eval_grid", 1000))
    stat, feas, comp = kkt_residual(problem, sol)
    doc = {
        "case": case.name,
        "formulation": formulation,
        "converged": sol.report.converged,
        "iterations": sol.report.iters,
        "norm": sol.report.objective,
        "constraint_violation": sol.report.final_constraint_violation,
        "stationarity": sol.report.final_stationarity,
        "kkt": {"stationarity": stat, "feasibility": feas, "complementarity": comp},
        "errors": {"L2": l2, "Linf": linf},
        "coefficients": [float(c) for c in sol.fn.coeffs],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        write_atomic(out, text + "\n")
    else:
        print(text)
    return 0 if sol.report.converged else 2


def cmd_study(config: dict, out: str | None, seed: int | None) -> int:
    if "study" not in config:
        raise InputError("the study subcommand requires a 'study' config block")
    case, kernel, solver = _build(config, seed)
    sdoc = config["study"]
    param = sdoc["parameter"]
    sweep = tuple(sdoc["sweep"])
    if param in ("N", "M"):
        sweep = tuple(int(v) for v in sweep)
    fixed = dict(sdoc.get("fixed", {}))
    if config.get("c_hat") is not None:
        fixed.setdefault("c_hat", config["c_hat"])
    spec = StudySpec(
        case=case,
        formulation=("Regularized" if param == "mu" else config["formulation"]),
        sweep=sweep, kernel=kernel, solver=solver, fixed=fixed,
        eval_grid=config.get("eval_grid", 1000),
    )
    runner = {"N": study_vary_N, "M": study_vary_M, "mu": study_vary_mu}[param]
    result = runner(spec)
    result.config.update({"case": case.name, "formulation": spec.formulation})
    csv_text = result.to_csv()
    if out:
        write_atomic(out, csv_text)
        root, _ = os.path.splitext(out)
        write_atomic(root + ".json", result.to_json() + "\n")
    else:
        print(csv_text, end="")
    return 0 if all(r.converged for r in result.rows) else 2


def _fd_apply(kernel: KernelSpec, op, f, arg: int, step: float):
    """Central-difference realization of op acting on argument `arg` of
    f(x, y)."""

    def shift(x, y, d):
        return (x + d, y) if arg == 0 else (x, y + d)

    if op.kind == "identity":
        return f
    if op.kind == "gradient":
        e = np.zeros(kernel.dim)
        e[op.component] = step
        return lambda x, y: (f(*shift(x, y, e)) - f(*shift(x, y, -e))) / (2 * step)
    if op.kind == "normal_derivative":
        d = step * np.asarray(op.normal)
        return lambda x, y: (f(*shift(x, y, d)) - f(*shift(x, y, -d))) / (2 * step)

    def neg_lap(x, y):
        out = 0.0
        for i in range(kernel.dim):
            e = np.zeros(kernel.dim)
            e[i] = step
            out -= (
                f(*shift(x, y, e)) - 2 * f(x, y) + f(*shift(x, y, -e))
            ) / step**2
        return out

    return neg_lap


def _fd_pair(kernel: KernelSpec, opL, opR, x, y, h=None):
    """Finite-difference oracle for operator-applied kernel values.

    Two Richardson extrapolation levels lift the central stencils to sixth
    order, which keeps the fourth-order mixed derivatives accurate without
    driving the step into round-off.  The step scales with the lengthscale
    so short-lengthscale kernels keep the truncation error in range."""
    if h is None:
        h = min(0.02, kernel.lengthscale / 8.0)

    def base(a, b):
        return eval_kernel(kernel, a, b)

    def at(step):
        fn = _fd_apply(kernel, opR, _fd_apply(kernel, opL, base, 0, step), 1, step)
        return fn(np.asarray(x, float), np.asarray(y, float))

    r1_h = (4 * at(h / 2) - at(h)) / 3.0
    r1_h2 = (4 * at(h / 4) - at(h / 2)) / 3.0
    return (16 * r1_h2 - r1_h) / 15.0


def cmd_validate_kernel(family: str, lengthscale: float, dim: int) -> int:
    kernel = KernelSpec(family, lengthscale, dim=dim)
    ops = [identity(), gradient(0), neg_laplacian()]
    if dim == 1:
        ops.append(normal_derivative((1.0,)))
    else:
        ops.append(normal_derivative((0.0, 1.0)))
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 0.8, dim)
    y = rng.uniform(0.2, 0.8, dim)
    corrupt = os.environ.get("KERNREC_CORRUPT_DERIV", "") not in ("", "0")
    worst = 0.0
    print(f"kernel {family} lengthscale={lengthscale} dim={dim}")
    print(f"{'left':<20}{'right':<20}{'analytic':>16}{'numeric':>16}{'error':>12}")
    for opL in ops:
        for opR in ops:
            analytic = apply_operators(kernel, opL, opR, x, y)
            if corrupt:
                analytic *= 1.001
                analytic += 1e-3
            numeric = _fd_pair(kernel, opL, opR, x, y)
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            ln = opL.kind if opL.kind != "gradient" else f"gradient[{opL.component}]"
            rn = opR.kind if opR.kind != "gradient" else f"gradient[{opR.component}]"
            print(f"{ln:<20}{rn:<20}{analytic:>16.8e}{numeric:>16.8e}{err:>12.2e}")
    ok = worst < 1e-5
    print(f"max relative error {worst:.2e}: {'OK' if ok else 'FAILED'}")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernrec",
        description="Kernel-collocation recovery of nonlinear equations from "
                    "finitely many measurements.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", default=None, help="output path (stdout if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override solver seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS thread count")

    p = sub.add_parser("solve", help="assemble and solve one recovery problem")
    common(p)
    p = sub.add_parser("study", help="run a parameter sweep and write CSV/JSON")
    common(p)
    p = sub.add_parser("validate-kernel",
                       help="check kernel derivatives against finite differences")
    p.add_argument("--family", default="gaussian",
                   choices=["gaussian", "inverse_multiquadric"])
    p.add_argument("--lengthscale", type=float, default=0.2)
    p.add_argument("--dim", type=int, default=1, choices=[1, 2])
    return parser


def _set_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-kernel":
            return cmd_validate_kernel(args.family, args.lengthscale, args.dim)
        _set_threads(args.threads)
        config = load_config(args.config)
        if args.command == "solve":
            return cmd_solve(config, args.out, args.seed)
        return cmd_study(config, args.out, args.seed)
    except (InputError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConditioningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
