"""End-to-end properties of the solver and optimizer on the benchmark geometries."""

import numpy as np
import pytest

from api.services.assembly import SourceSpec, assemble_state
from api.services.benchmark_service import motor_like, square_grid
from api.services.linear_solvers import PreparedSolver, SolverOptions
from api.services.multipatch_topology import build_dof_map
from api.services.shape_optimization import (
    OptimizerConfig,
    ShapeOptimizer,
    build_design_map,
    compute_shape_gradient,
    evaluate_objective,
    feasibility_line_search,
    finite_difference_check,
    make_problem,
)
from api.services.simulation_service import SimulationService
from api.services.spline_geometry import SignCertificate, jacobian_sign_certificate
from tests.unit.services.test_shape_optimization import fold_domain


@pytest.mark.slow
@pytest.mark.parametrize("degree", [1, 2, 3])
def test_manufactured_convergence_order(degree, app_settings):
    service = SimulationService(app_settings)
    errors = [
        service.simulate(square_grid(2, level, degree), manufactured=True).l2_error
        for level in range(4)
    ]

    order = np.log2(errors[-2] / errors[-1])

    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert order >= degree + 0.7


@pytest.mark.slow
def test_motor_shape_derivative_matches_finite_differences():
    domain = motor_like(0)
    problem = make_problem(domain)
    dvar = build_design_map(domain, problem.dof_map)
    _, u = evaluate_objective(domain, problem)
    gradient = compute_shape_gradient(domain, u, None, problem)
    rng = np.random.default_rng(2024)
    steps = (1e-2, 1e-3, 1e-4, 1e-5)

    assert float(gradient.dj @ gradient.field) > 0
    for _ in range(5):
        design = rng.normal(size=dvar.size)
        field_vec = dvar.embed(1e-3 * design / np.abs(design).max())

        rows = finite_difference_check(domain, problem, field_vec, steps=steps, dj=gradient.dj)

        errors = np.array([abs(q - predicted) for _, q, predicted in rows])
        slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
        assert slope >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize("level", [0, 1, 2])
def test_motor_ieti_matches_direct(level):
    domain = motor_like(level)
    dof_map = build_dof_map(domain)
    system = assemble_state(domain, dof_map, SourceSpec())

    direct, _ = PreparedSolver(system, SolverOptions(solver="direct")).solve()
    ieti, log = PreparedSolver(
        system, SolverOptions(solver="ieti", tol=1e-8, workers=2), domain, dof_map
    ).solve()

    assert log.iterations > 0
    assert log.rel_residual <= 1e-7
    assert np.max(np.abs(ieti - direct)) <= 1e-6


@pytest.mark.slow
def test_motor_ieti_peak_memory_below_direct():
    domain = motor_like(2)
    dof_map = build_dof_map(domain)
    system = assemble_state(domain, dof_map, SourceSpec())
    direct = PreparedSolver(system, SolverOptions(solver="direct"))

    _, log = PreparedSolver(system, SolverOptions(solver="ieti", workers=4), domain, dof_map).solve()

    assert log.workers == 4
    assert log.peak_factor_nnz < direct.factor_nnz
    assert log.peak_factor_nnz < log.factor_nnz


@pytest.mark.slow
def test_motor_steepest_descent_run():
    domain = motor_like(0)
    config = OptimizerConfig(max_iterations=50)

    result = ShapeOptimizer(make_problem(domain), config).run(domain)

    objectives = [row.objective for row in result.history]
    assert all(b <= a for a, b in zip(objectives, objectives[1:]))
    assert result.final.objective <= 0.8 * result.initial.objective
    for geometry in result.geometries:
        assert all(
            jacobian_sign_certificate(geometry.patches[p]) == SignCertificate.ALL_POSITIVE
            for p in range(geometry.n_patches)
        )


@pytest.mark.slow
def test_motor_bfgs_reaches_steepest_descent_objective():
    domain = motor_like(0)
    problem = make_problem(domain)

    results = {
        algorithm: ShapeOptimizer(problem, OptimizerConfig(algorithm=algorithm, max_iterations=50)).run(domain)
        for algorithm in ("steepest_descent", "bfgs")
    }

    j0 = results["bfgs"].initial.objective
    j_sd = results["steepest_descent"].final.objective
    j_bfgs = results["bfgs"].final.objective
    assert j_bfgs <= 0.8 * j0
    assert j_bfgs <= j_sd + 0.01 * (j0 - j_sd)


@pytest.mark.parametrize("seed", range(20))
def test_randomized_fold_is_shrunk(seed):
    domain = fold_domain()
    dvar = build_design_map(domain, build_dof_map(domain))
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.zeros(dvar.size)
    direction[[8, 9]] = rng.uniform(0.6, 2.0) * np.array([np.cos(angle), np.sin(angle)])

    state = feasibility_line_search(
        domain, dvar, direction, 1.0, OptimizerConfig(),
        evaluate=lambda d: (0.0, None), slope=-1.0,
    )

    assert state.shrink_count >= 1
    assert state.step < OptimizerConfig().initial_step
    assert state.feasibility == {0: SignCertificate.ALL_POSITIVE}
    assert jacobian_sign_certificate(state.domain.patches[0]) == SignCertificate.ALL_POSITIVE
