import numpy as np
import pytest
from scipy import sparse

from api.services import linear_solvers
from api.services.assembly import SourceSpec, SparseSymmetricSystem, assemble_state, assemble_stiffness
from api.services.benchmark_service import square_grid
from api.services.errors import ContractError, ConvergenceError, FactorizationError, PartitionError
from api.services.linear_solvers import (
    Partition,
    PreparedSolver,
    SolverOptions,
    cross_points,
    direct_solve,
    factor_spd,
    ieti_setup,
    ieti_solve,
    partition_balanced,
    solve_parallel,
)
from api.services.multipatch_topology import MaterialKind, MaterialTag, build_dof_map
from tests.conftest import make_domain, strip_domain, unit_patch


def tridiagonal(n: int):
    return sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def state_system(domain, j3=1.0):
    dof_map = build_dof_map(domain)
    system = assemble_state(domain, dof_map, SourceSpec(j3=(j3,) * domain.n_patches))
    return dof_map, system


def checkerboard(n=3, level=1, degree=2, contrast=100.0):
    grid = square_grid(n, level, degree)
    materials = [
        MaterialTag(MaterialKind.AIR, contrast if (i // n + i % n) % 2 else 1.0) for i in range(grid.n_patches)
    ]
    return make_domain(grid.patches, dirichlet=grid.dirichlet_sides, materials=materials)


def dual_iterations(log, tol):
    """Iterations of the first dual solve; correction passes continue the same history."""
    return next(i for i, r in enumerate(log.residuals) if r <= tol)


def multiplicity_of(dof_map, partition):
    counts = np.zeros(dof_map.n_free, dtype=np.intp)
    for patches in partition.subdomains:
        red = np.concatenate([dof_map.reduced_index[dof_map.local_to_global[p]] for p in patches])
        counts[np.unique(red[red >= 0])] += 1
    return counts


class TestDirect:
    def test_tridiagonal(self):
        system = SparseSymmetricSystem.from_matrix(tridiagonal(5), rhs=np.ones(5))

        x, log = direct_solve(system)

        np.testing.assert_allclose(x, [2.5, 4.0, 4.5, 4.0, 2.5])
        assert log.solver == "direct"
        assert log.factor_nnz > 0

    def test_indefinite_rejected(self):
        with pytest.raises(FactorizationError):
            factor_spd(sparse.csr_matrix([[1.0, 2.0], [2.0, 1.0]]), "test")

    def test_prepared_solver_reuses_factorization(self, square_domain):
        dof_map, system = state_system(square_domain)
        solver = PreparedSolver(system, SolverOptions())

        x1, log = solver.solve()
        x2, _ = solver.solve(2.0 * system.rhs)

        np.testing.assert_allclose(x2, 2.0 * x1)
        assert log.rel_residual < 1e-12
        assert np.all(x1[dof_map.dirichlet_mask] == 0.0)


class TestPartition:
    def test_single_subdomain(self, square_domain):
        partition = partition_balanced(square_domain, build_dof_map(square_domain), 1)

        assert partition.subdomains == ((0, 1, 2, 3),)

    def test_one_patch_per_subdomain(self, square_domain):
        partition = partition_balanced(square_domain, build_dof_map(square_domain), 4)

        assert sorted(partition.subdomains) == [(0,), (1,), (2,), (3,)]

    def test_strip_splits_into_pairs(self):
        domain = strip_domain(8)

        partition = partition_balanced(domain, build_dof_map(domain), 4)

        assert sorted(partition.subdomains) == [(0, 1), (2, 3), (4, 5), (6, 7)]
        assert partition.balance() == pytest.approx(1.0)

    @pytest.mark.parametrize("n_sub", [0, 5])
    def test_out_of_range(self, square_domain, n_sub):
        with pytest.raises(PartitionError):
            partition_balanced(square_domain, build_dof_map(square_domain), n_sub)

    def test_disconnected_patches(self):
        domain = make_domain([unit_patch(), unit_patch(origin=(3.0, 0.0))])

        with pytest.raises(PartitionError):
            partition_balanced(domain, build_dof_map(domain), 1)


class TestIetiDp:
    def test_single_subdomain_matches_direct(self, square_domain):
        dof_map, system = state_system(square_domain)
        partition = partition_balanced(square_domain, dof_map, 1)

        x, log = PreparedSolver(system, SolverOptions(solver="ieti"), square_domain, dof_map, partition).solve()
        expected, _ = direct_solve(system)

        np.testing.assert_allclose(x, expected, rtol=0, atol=1e-12 * np.abs(expected).max())
        assert log.iterations == 0

    def test_two_patches_have_corner_primals(self, two_patch_domain):
        dof_map, system = state_system(two_patch_domain)
        partition = partition_balanced(two_patch_domain, dof_map, 2)

        op = ieti_setup(system, two_patch_domain, dof_map, partition)
        x, _ = ieti_solve(op, system.reduced_rhs(), tol=1e-12)
        expected, _ = direct_solve(system)

        assert op.primal_dofs.size == 2
        assert op.n_lambda == 1
        np.testing.assert_allclose(system.expand(x), expected, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("scaling", ["multiplicity", "coefficient"])
    def test_checkerboard_matches_direct(self, scaling):
        domain = checkerboard()
        dof_map, system = state_system(domain)
        options = SolverOptions(solver="ieti", n_subdomains=9, tol=1e-10, scaling=scaling)

        x, log = PreparedSolver(system, options, domain, dof_map).solve()
        expected, _ = direct_solve(system)

        assert log.solver == "ieti"
        assert 0 < log.iterations < 100
        assert log.residuals[-1] <= 1e-10
        np.testing.assert_allclose(x, expected, rtol=0, atol=1e-7 * np.abs(expected).max())

    def test_coefficient_scaling_uses_reluctivity(self):
        domain = checkerboard(contrast=1e4)
        dof_map, system = state_system(domain)
        partition = partition_balanced(domain, dof_map, 9)

        iterations = {}
        for scaling in ("multiplicity", "coefficient"):
            op = ieti_setup(system, domain, dof_map, partition, scaling)
            _, log = ieti_solve(op, system.reduced_rhs(), tol=1e-8)
            iterations[scaling] = dual_iterations(log, 1e-8)

        assert iterations["coefficient"] <= iterations["multiplicity"]

    def test_deterministic_parallel_is_reproducible(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
        rhs = system.reduced_rhs()

        sequential, _ = ieti_solve(op, rhs, tol=1e-10)
        parallel, log = solve_parallel(op, rhs, tol=1e-10, n_workers=3, deterministic=True)

        np.testing.assert_array_equal(parallel, sequential)
        assert log.workers == 3

    def test_unordered_parallel_agrees(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9), n_workers=2)
        rhs = system.reduced_rhs()

        sequential, _ = ieti_solve(op, rhs, tol=1e-10)
        parallel, _ = solve_parallel(op, rhs, tol=1e-10, n_workers=2, deterministic=False)

        np.testing.assert_allclose(parallel, sequential, rtol=1e-8, atol=1e-12)

    def test_straight_cut_has_no_cross_points(self, square_domain):
        dof_map, system = state_system(square_domain)
        partition = partition_balanced(square_domain, dof_map, 2)

        op = ieti_setup(system, square_domain, dof_map, partition)
        x, log = ieti_solve(op, system.reduced_rhs(), tol=1e-10)
        expected, _ = direct_solve(system)

        # the centre corner sits inside the cut, both cut ends are Dirichlet dofs
        assert op.primal_dofs.size == 0
        assert op.n_lambda == 5
        np.testing.assert_allclose(system.expand(x), expected, rtol=0, atol=1e-8 * np.abs(expected).max())

    def test_four_subdomains_meet_at_one_cross_point(self, square_domain):
        dof_map, system = state_system(square_domain)

        op = ieti_setup(system, square_domain, dof_map, partition_balanced(square_domain, dof_map, 4))

        assert op.primal_dofs.size == 1
        assert op.n_lambda == 8

    def test_enclosed_floating_subdomain_is_pinned(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        ring = tuple(p for p in range(domain.n_patches) if p != 4)
        partition = Partition(subdomains=((4,), ring), dof_counts=(16, 33))

        mask = cross_points(domain, dof_map, partition, multiplicity_of(dof_map, partition))
        op = ieti_setup(system, domain, dof_map, partition)
        x, _ = ieti_solve(op, system.reduced_rhs(), tol=1e-10)
        expected, _ = direct_solve(system)

        assert mask.sum() == 1
        assert op.primal_dofs.size == 1
        np.testing.assert_allclose(system.expand(x), expected, rtol=0, atol=1e-8 * np.abs(expected).max())

    def test_primal_residual_meets_tolerance(self):
        domain = checkerboard(contrast=1e4)
        dof_map, system = state_system(domain, j3=250.0)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
        b = system.reduced_rhs()

        x, log = ieti_solve(op, b, tol=1e-8)

        assert np.linalg.norm(system.reduced @ x - b) <= 1e-7 * np.linalg.norm(b)
        assert log.rel_residual <= 1e-7

    def test_correction_passes_recover_from_loose_dual_solves(self, monkeypatch):
        domain = checkerboard()
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
        b = system.reduced_rhs()
        dual_solve = linear_solvers._pcg
        monkeypatch.setattr(
            linear_solvers, "_pcg", lambda op_, d, tol, *args: dual_solve(op_, d, max(tol, 1e-4), *args)
        )

        x, log = ieti_solve(op, b, tol=1e-8)
        expected, _ = direct_solve(system)

        assert log.refinements >= 1
        assert np.linalg.norm(system.reduced @ x - b) <= 1e-7 * np.linalg.norm(b)
        np.testing.assert_allclose(system.expand(x), expected, rtol=0, atol=1e-6 * np.abs(expected).max())

    def test_primal_residual_above_contract_raises(self, monkeypatch):
        domain = checkerboard()
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
        dual_solve = linear_solvers._pcg
        monkeypatch.setattr(
            linear_solvers, "_pcg", lambda op_, d, tol, *args: dual_solve(op_, d, max(tol, 1e-3), *args)
        )
        monkeypatch.setattr(linear_solvers, "MAX_REFINEMENTS", 0)

        with pytest.raises(ConvergenceError, match="primal residual"):
            ieti_solve(op, system.reduced_rhs(), tol=1e-12)

    def test_interface_jump_vanishes(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))

        x, log = ieti_solve(op, system.reduced_rhs(), tol=1e-10)

        assert op.n_lambda > 0
        assert log.interface_jump <= 1e-7 * np.abs(x).max()

    def test_iterations_stay_flat_under_refinement(self):
        iterations = []
        for level in (1, 2, 3):
            domain = square_grid(3, level, 2)
            dof_map, system = state_system(domain)
            op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
            _, log = ieti_solve(op, system.reduced_rhs(), tol=1e-8)
            iterations.append(dual_iterations(log, 1e-8))

        assert min(iterations) > 0
        assert max(iterations) <= 2 * min(iterations) + 4

    def test_peak_share_splits_over_workers(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))
        coarse = op.primal_dofs.size ** 2

        assert op.peak_factor_nnz(1) == op.factor_nnz
        assert op.peak_factor_nnz(3) < op.factor_nnz
        assert op.peak_factor_nnz(3) - coarse >= (op.factor_nnz - coarse) / 3
        assert op.peak_factor_nnz(64) == max(sd.factor_nnz for sd in op.subdomains) + coarse

    def test_iteration_cap(self):
        domain = square_grid(3, 1, 2)
        dof_map, system = state_system(domain)
        op = ieti_setup(system, domain, dof_map, partition_balanced(domain, dof_map, 9))

        with pytest.raises(ConvergenceError) as excinfo:
            ieti_solve(op, system.reduced_rhs(), tol=1e-30, max_it=1)

        assert len(excinfo.value.residuals) == 2

    def test_unknown_scaling(self, square_domain):
        dof_map, system = state_system(square_domain)

        with pytest.raises(ContractError):
            ieti_setup(system, square_domain, dof_map, partition_balanced(square_domain, dof_map, 2), "deluxe")

    def test_needs_patch_blocks(self, square_domain):
        dof_map = build_dof_map(square_domain)
        bare = SparseSymmetricSystem.from_matrix(assemble_stiffness(square_domain, dof_map).matrix)

        with pytest.raises(ContractError):
            ieti_setup(bare, square_domain, dof_map, partition_balanced(square_domain, dof_map, 2))


class TestSolverOptions:
    def test_unknown_solver(self):
        with pytest.raises(ContractError):
            SolverOptions(solver="gmres")

    def test_workers_positive(self):
        with pytest.raises(ContractError):
            SolverOptions(workers=0)

    @pytest.mark.parametrize("n_subdomains,workers,n_patches,expected", [
        (0, 1, 72, 4),
        (0, 8, 72, 8),
        (6, 1, 72, 6),
        (0, 1, 2, 2),
    ])
    def test_subdomain_count(self, n_subdomains, workers, n_patches, expected):
        options = SolverOptions(n_subdomains=n_subdomains, workers=workers)

        assert options.subdomain_count(n_patches) == expected

    def test_ieti_needs_domain(self, square_domain):
        _, system = state_system(square_domain)

        with pytest.raises(ContractError):
            PreparedSolver(system, SolverOptions(solver="ieti"))
