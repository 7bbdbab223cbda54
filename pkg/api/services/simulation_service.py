"""
Simulation Service - simulate, optimize and bench commands.

Each service takes a domain and a run config, resolves the solver choice
against the application settings and writes its artifacts to an output
directory. The CLI and the HTTP controller are thin wrappers around these.
"""

import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from api.config.logging import get_logger
from api.config.settings import AppSettings
from api.models.schemas import (
    ProfilePoint,
    RunConfig,
    SimulationSummary,
    TargetFluxSpec,
    dump_model,
)
from api.services import export_service
from api.services.assembly import (
    AirGapProfile,
    SourceSpec,
    TargetFlux,
    airgap_profile,
    assemble_airgap_terms,
    assemble_state,
    calibrate_target,
    default_order,
    l2_error,
    sample_patch_field,
)
from api.services.benchmark_service import manufactured_forcing, manufactured_solution
from api.services.errors import ContractError, GeometryError, OptimizationFailed
from api.services.geometry_io import save_geometry
from api.services.linear_solvers import PcgLog, PreparedSolver, SolverOptions, partition_balanced
from api.services.multipatch_topology import GlobalDofMap, MultiPatchDomain, build_dof_map
from api.services.shape_optimization import (
    OptimizationResult,
    OptimizerConfig,
    ShapeOptimizer,
    make_problem,
)
from api.services.spline_geometry import SignCertificate, jacobian_sign_certificate

logger = get_logger("service.simulation")


def solver_options(config: RunConfig, settings: AppSettings, overrides: Optional[dict] = None) -> SolverOptions:
    """CLI overrides beat the run config, which beats the settings."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    def pick(name: str, config_value: Any, default: Any) -> Any:
        if name in overrides:
            return overrides[name]
        return config_value if config_value is not None else default

    return SolverOptions(
        solver=pick("solver", config.solver, settings.solver),
        workers=int(pick("workers", config.workers, settings.default_workers)),
        tol=float(pick("tol", config.tol, settings.tol)),
        max_iterations=int(pick("max_iterations", config.max_solver_iterations, settings.max_solver_iterations)),
        n_subdomains=int(pick("n_subdomains", config.n_subdomains, settings.n_subdomains)),
        scaling=pick("scaling", config.scaling, settings.ieti_scaling),
        deterministic=bool(pick("deterministic", config.deterministic, settings.deterministic)),
    )


def quadrature_order(domain: MultiPatchDomain, config: RunConfig, settings: AppSettings) -> Optional[int]:
    if config.quadrature_order is not None:
        return config.quadrature_order
    if settings.quadrature_extra:
        return max(default_order(p, settings.quadrature_extra) for p in domain.patches)
    return None


def build_source(domain: MultiPatchDomain, config: RunConfig, manufactured: bool = False) -> SourceSpec:
    j3 = tuple(float(j) for j in config.current_density)
    if j3 and len(j3) != domain.n_patches:
        raise ContractError(f"current_density needs {domain.n_patches} values, got {len(j3)}")
    return SourceSpec(j3=j3, forcing=manufactured_forcing if manufactured else None)


def build_target(spec: TargetFluxSpec, length: Optional[float]) -> Optional[TargetFlux]:
    """Target flux from the run config; None when it must be calibrated on the initial state."""
    period = spec.period or length or 1.0
    if spec.kind == "constant":
        return TargetFlux(constant=spec.value)
    if spec.kind == "fourier":
        return TargetFlux(constant=spec.value, cos=tuple(spec.cos), sin=tuple(spec.sin), period=period)
    if spec.amplitude is None:
        return None
    return TargetFlux.four_pole(spec.amplitude, period)


def certify_geometry(domain: MultiPatchDomain) -> None:
    """Raise GeometryError unless every patch has a positive Jacobian."""
    for i, patch in enumerate(domain.patches):
        cert = jacobian_sign_certificate(patch)
        if cert != SignCertificate.ALL_POSITIVE:
            raise GeometryError(f"Patch {i} Jacobian certificate is {cert.value}")


def _curve_length(domain: MultiPatchDomain) -> Optional[float]:
    if domain.airgap_curve is None:
        return None
    return domain.airgap_curve.length(domain.patches)


@dataclass(eq=False)
class SimulationOutcome:
    domain: MultiPatchDomain
    dof_map: GlobalDofMap
    coeffs: NDArray[np.float64]
    log: PcgLog
    objective: Optional[float] = None
    profile: Optional[AirGapProfile] = None
    target: Optional[TargetFlux] = None
    l2_error: Optional[float] = None
    files: list[Path] = field(default_factory=list)


class SimulationService:
    """Service for a single state solve with field and profile exports."""

    def __init__(self, settings: AppSettings):
        self.settings = settings

    def simulate(
        self,
        domain: MultiPatchDomain,
        config: Optional[RunConfig] = None,
        overrides: Optional[dict] = None,
        manufactured: bool = False,
    ) -> SimulationOutcome:
        """
        Solve the magnetostatic state problem on a domain.

        Args:
            domain: Validated multipatch domain
            config: Run config (solver, sources, target)
            overrides: Command-line values taking precedence over the config
            manufactured: Use the sin(pi x) sin(pi y) forcing and report the L2 error

        Returns:
            Coefficients, solver log and, with an air-gap curve, objective and profile

        Raises:
            GeometryError: a patch Jacobian is not positive everywhere
            SolverError: factorization or iteration failure
        """
        config = config or RunConfig()
        certify_geometry(domain)
        options = solver_options(config, self.settings, overrides)
        q = quadrature_order(domain, config, self.settings)
        dof_map = build_dof_map(domain)
        source = build_source(domain, config, manufactured)

        system = assemble_state(domain, dof_map, source, q)
        coeffs, log = PreparedSolver(system, options, domain, dof_map).solve()
        logger.info(f"Solved {dof_map.n_free} free dofs with {log.solver} in {log.wall_time:.3f}s")
        outcome = SimulationOutcome(domain=domain, dof_map=dof_map, coeffs=coeffs, log=log)

        if domain.airgap_curve is not None:
            profile = airgap_profile(domain, dof_map, coeffs, q)
            target = build_target(config.target, profile.length) or calibrate_target(profile)
            outcome.objective, _ = assemble_airgap_terms(domain, dof_map, target, coeffs, q)
            outcome.profile, outcome.target = profile, target
            logger.info(f"Air-gap objective J={outcome.objective:.6e}")
        if manufactured:
            outcome.l2_error = l2_error(domain, dof_map, coeffs, manufactured_solution, q)
            logger.info(f"L2 error against the manufactured solution: {outcome.l2_error:.6e}")
        return outcome

    def write_outputs(self, outcome: SimulationOutcome, out_dir: Path, sample_grid: int = 10) -> list[Path]:
        out_dir = Path(out_dir)
        files = [export_service.write_coefficients(out_dir / "coefficients.csv", outcome.coeffs)]
        fields = [
            sample_patch_field(outcome.domain, outcome.dof_map, outcome.coeffs, i, sample_grid)
            for i in range(outcome.domain.n_patches)
        ]
        files += export_service.write_vtk_fields(out_dir / "vtk", fields)
        if outcome.profile is not None:
            files.append(export_service.write_profile_csv(out_dir / "airgap_profile.csv", outcome.profile, outcome.target))
        outcome.files = files
        return files

    @staticmethod
    def summary(outcome: SimulationOutcome) -> SimulationSummary:
        profile = []
        if outcome.profile is not None:
            profile = [
                ProfilePoint(s=s, x=x, y=y, b_n=bn, b_d=bd)
                for s, x, y, bn, bd in export_service.profile_rows(outcome.profile, outcome.target)
            ]
        return SimulationSummary(
            objective=outcome.objective,
            n_dofs=outcome.dof_map.n_global,
            solver=outcome.log.solver,
            iterations=outcome.log.iterations,
            rel_residual=outcome.log.rel_residual,
            l2_error=outcome.l2_error,
            profile=profile,
        )


class OptimizationService:
    """Service for shape optimization runs."""

    def __init__(self, settings: AppSettings):
        self.settings = settings

    def optimize(
        self,
        domain: MultiPatchDomain,
        config: Optional[RunConfig] = None,
        overrides: Optional[dict] = None,
    ) -> OptimizationResult:
        """
        Run the optimizer configured by ``config.optimizer``.

        Raises:
            GeometryError: the initial design is not certified
            OptimizationFailed: a later step failed; carries the partial history
        """
        config = config or RunConfig()
        certify_geometry(domain)
        opt_config = OptimizerConfig(**dump_model(config.optimizer))
        problem = make_problem(
            domain,
            source=build_source(domain, config),
            target=build_target(config.target, _curve_length(domain)),
            solver=solver_options(config, self.settings, overrides),
            alpha=config.alpha,
            q=quadrature_order(domain, config, self.settings),
        )
        return ShapeOptimizer(problem, opt_config).run(domain)

    @staticmethod
    def write_outputs(result: OptimizationResult, out_dir: Path) -> list[Path]:
        out_dir = Path(out_dir)
        files = [
            export_service.write_history_csv(out_dir / "history.csv", result.history),
            save_geometry(result.initial.domain, out_dir / "initial_geometry.json"),
            save_geometry(result.final.domain, out_dir / "final_geometry.json"),
        ]
        for row, profile in zip(result.history, result.profiles):
            files.append(export_service.write_profile_csv(
                out_dir / "profiles" / f"profile_{row.iteration:03d}.csv", profile, result.target
            ))
        for row, geometry in zip(result.history, result.geometries):
            files.append(save_geometry(geometry, out_dir / "geometries" / f"iterate_{row.iteration:03d}.json"))
        logger.info(f"Wrote optimization history ({len(result.history)} rows) to {out_dir}")
        return files

    def write_failure(self, failure: OptimizationFailed, out_dir: Path) -> list[Path]:
        if failure.result is None:
            return []
        return self.write_outputs(failure.result, out_dir)


def scaling_rates(totals: Sequence[float]) -> list[Optional[float]]:
    """rate_k = t_{k-1} / t_k; the first entry has no predecessor."""
    return [None] + [totals[k - 1] / totals[k] for k in range(1, len(totals))]


def bench_worker_counts(settings: AppSettings) -> list[int]:
    """Doubling worker counts up to the configured thread budget (1, 2, 4 when unset)."""
    limit = settings.default_workers if settings.default_workers > 1 else 4
    counts, w = [], 1
    while w < limit:
        counts.append(w)
        w *= 2
    counts.append(limit)
    return counts


class BenchService:
    """Strong-scaling harness: direct solve plus tearing solves over worker counts."""

    def __init__(self, settings: AppSettings):
        self.settings = settings

    def _measure(self, build, repeats: int) -> tuple[float, float, PcgLog]:
        setups, solves, log = [], [], None
        for _ in range(repeats):
            solver = build()
            _, log = solver.solve()
            setups.append(log.setup_time)
            solves.append(log.iterate_time)
        assert log is not None
        return statistics.median(setups), statistics.median(solves), log

    def bench(
        self,
        domain: MultiPatchDomain,
        config: Optional[RunConfig] = None,
        workers: Optional[Sequence[int]] = None,
        overrides: Optional[dict] = None,
    ) -> list[dict]:
        """
        Time the direct solver once and the tearing solver for each worker count.

        Each configuration runs ``bench_repeats`` times and reports medians. The
        partition is fixed across worker counts so iteration counts are comparable.
        """
        config = config or RunConfig()
        workers = list(workers or config.bench_workers or bench_worker_counts(self.settings))
        if not workers or any(w < 1 for w in workers):
            raise ContractError(f"Worker counts must be positive, got {workers}")
        base = solver_options(config, self.settings, overrides)
        q = quadrature_order(domain, config, self.settings)
        dof_map = build_dof_map(domain)
        system = assemble_state(domain, dof_map, build_source(domain, config), q)
        repeats = config.bench_repeats

        rows = []
        direct = SolverOptions(solver="direct")
        setup, solve, log = self._measure(lambda: PreparedSolver(system, direct), repeats)
        rows.append(self._row(dof_map, "direct", 1, setup, solve, log, None))

        n_sub = base.n_subdomains or max(max(workers), 4)
        partition = partition_balanced(domain, dof_map, min(n_sub, domain.n_patches))
        totals, ieti_rows = [], []
        for w in workers:
            opts = SolverOptions(
                solver="ieti",
                workers=w,
                tol=base.tol,
                max_iterations=base.max_iterations,
                n_subdomains=partition.n_sub,
                scaling=base.scaling,
                deterministic=base.deterministic,
            )
            setup, solve, log = self._measure(
                lambda: PreparedSolver(system, opts, domain, dof_map, partition), repeats
            )
            totals.append(setup + solve)
            ieti_rows.append(self._row(dof_map, "ieti", w, setup, solve, log, None))
        for row, rate in zip(ieti_rows, scaling_rates(totals)):
            row["rate"] = rate
        rows.extend(ieti_rows)
        logger.info(f"Benchmarked {dof_map.n_global} dofs over workers {workers}")
        return rows

    @staticmethod
    def _row(dof_map: GlobalDofMap, solver: str, workers: int, setup: float, solve: float,
             log: PcgLog, rate: Optional[float]) -> dict:
        return {
            "dofs": dof_map.n_global,
            "solver": solver,
            "workers": workers,
            "setup_s": setup,
            "solve_s": solve,
            "iterations": log.iterations,
            "rel_residual": log.rel_residual,
            "rate": rate,
            "factor_nnz": log.factor_nnz,
            "peak_factor_nnz": log.peak_factor_nnz,
        }

    @staticmethod
    def write_outputs(rows: Sequence[dict], out_dir: Path) -> Path:
        return export_service.write_bench_csv(Path(out_dir) / "bench.csv", rows)
