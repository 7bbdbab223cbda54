import numpy as np
import pytest

from api.config.settings_base import AppSettings
from api.models.schemas import OptimizerBlock, RunConfig, TargetFluxSpec
from api.services.errors import ContractError, GeometryError, OptimizationFailed
from api.services.simulation_service import (
    BenchService,
    bench_worker_counts,
    OptimizationService,
    SimulationService,
    build_source,
    build_target,
    certify_geometry,
    quadrature_order,
    scaling_rates,
    solver_options,
)
from api.services.spline_geometry import Patch
from tests.conftest import make_domain
from tests.unit.services.test_shape_optimization import channel_domain
from tests.unit.services.test_spline_geometry import folded_patch


class TestSolverOptions:
    def test_settings_are_the_fallback(self, app_settings):
        options = solver_options(RunConfig(), app_settings)

        assert options.solver == "direct"
        assert options.workers == app_settings.default_workers
        assert options.tol == app_settings.tol

    def test_config_beats_settings(self, app_settings):
        options = solver_options(RunConfig(solver="ieti", tol=1e-6), app_settings)

        assert options.solver == "ieti"
        assert options.tol == 1e-6

    def test_overrides_beat_config(self, app_settings):
        config = RunConfig(solver="ieti", workers=3)

        options = solver_options(config, app_settings, {"solver": "direct", "workers": None})

        assert options.solver == "direct"
        assert options.workers == 3


class TestQuadratureOrder:
    def test_config_value(self, square_domain, app_settings):
        assert quadrature_order(square_domain, RunConfig(quadrature_order=5), app_settings) == 5

    def test_default_is_none(self, square_domain, app_settings):
        assert quadrature_order(square_domain, RunConfig(), app_settings) is None

    def test_extra_points_from_settings(self, square_domain, app_settings):
        app_settings.quadrature_extra = 2

        assert quadrature_order(square_domain, RunConfig(), app_settings) == 5


class TestSources:
    def test_current_density_length(self, square_domain):
        with pytest.raises(ContractError, match="current_density"):
            build_source(square_domain, RunConfig(current_density=[1.0]))

    def test_manufactured_forcing(self, square_domain):
        source = build_source(square_domain, RunConfig(), manufactured=True)

        assert source.forcing is not None
        assert source.j3 == ()


class TestBuildTarget:
    def test_constant(self):
        target = build_target(TargetFluxSpec(kind="constant", value=0.3), 2.0)

        np.testing.assert_allclose(target(np.array([0.0, 1.0])), [0.3, 0.3])

    def test_four_pole_without_amplitude_is_calibrated_later(self):
        assert build_target(TargetFluxSpec(), 2.0) is None

    def test_four_pole_period_is_curve_length(self):
        target = build_target(TargetFluxSpec(amplitude=0.5), 2.0)

        assert target.period == 2.0
        assert target(np.array([0.0]))[0] == pytest.approx(0.5)

    def test_fourier_explicit_period(self):
        spec = TargetFluxSpec(kind="fourier", sin=[1.0], period=4.0)

        target = build_target(spec, 2.0)

        assert target(np.array([1.0]))[0] == pytest.approx(1.0)


class TestCertifyGeometry:
    def test_accepts_positive(self, square_domain):
        certify_geometry(square_domain)

    def test_rejects_fold(self):
        with pytest.raises(GeometryError, match="Patch 0"):
            certify_geometry(make_domain([folded_patch()]))

    def test_rejects_mirrored(self):
        patch = folded_patch((0.5, 0.5))
        mirrored = Patch(patch.basis, patch.control_points * np.array([-1.0, 1.0]))

        with pytest.raises(GeometryError, match="AllNegative"):
            certify_geometry(make_domain([mirrored]))


class TestSimulationService:
    def test_manufactured_solution(self, square_domain, app_settings):
        outcome = SimulationService(app_settings).simulate(square_domain, manufactured=True)

        assert outcome.log.solver == "direct"
        assert outcome.objective is None
        assert outcome.profile is None
        assert outcome.l2_error < 5e-2

    def test_ieti_matches_direct(self, square_domain, app_settings):
        service = SimulationService(app_settings)

        direct = service.simulate(square_domain, manufactured=True)
        ieti = service.simulate(square_domain, overrides={"solver": "ieti", "tol": 1e-12}, manufactured=True)

        assert ieti.log.solver == "ieti"
        np.testing.assert_allclose(ieti.coeffs, direct.coeffs, rtol=1e-8, atol=1e-10)

    def test_write_outputs_without_curve(self, square_domain, app_settings, tmp_path):
        service = SimulationService(app_settings)
        outcome = service.simulate(square_domain, manufactured=True)

        files = service.write_outputs(outcome, tmp_path, sample_grid=3)
        names = sorted(p.relative_to(tmp_path).as_posix() for p in files)

        assert names == ["coefficients.csv"] + [f"vtk/field_patch{i:03d}.vtk" for i in range(4)]
        assert outcome.files == files

    def test_curve_adds_objective_and_profile(self, app_settings, tmp_path):
        service = SimulationService(app_settings)
        outcome = service.simulate(channel_domain(), RunConfig(current_density=[1.0, 0.0, 0.0]))

        files = service.write_outputs(outcome, tmp_path, sample_grid=3)

        assert outcome.objective is not None and outcome.objective >= 0.0
        assert (tmp_path / "airgap_profile.csv") in files
        summary = SimulationService.summary(outcome)
        assert len(summary.profile) == outcome.profile.s.size

    def test_folded_geometry_rejected(self, app_settings):
        with pytest.raises(GeometryError):
            SimulationService(app_settings).simulate(make_domain([folded_patch()]))


class TestOptimizationService:
    def test_single_iteration_outputs(self, app_settings, tmp_path):
        config = RunConfig(current_density=[1.0, 0.0, 0.0], optimizer=OptimizerBlock(max_iterations=1))
        service = OptimizationService(app_settings)

        result = service.optimize(channel_domain(), config)
        service.write_outputs(result, tmp_path)

        assert result.final.objective <= result.initial.objective
        for name in ("history.csv", "initial_geometry.json", "final_geometry.json"):
            assert (tmp_path / name).exists()
        assert (tmp_path / "profiles" / "profile_000.csv").exists()
        assert (tmp_path / "geometries" / "iterate_000.json").exists()

    def test_failure_without_result(self, app_settings, tmp_path):
        failure = OptimizationFailed(GeometryError("folded"), None)

        assert OptimizationService(app_settings).write_failure(failure, tmp_path) == []


def test_scaling_rates():
    assert scaling_rates([4.0, 2.0, 1.0]) == [None, 2.0, 2.0]


class TestBenchService:
    def test_rows(self, square_domain, app_settings, tmp_path):
        service = BenchService(app_settings)

        rows = service.bench(square_domain, RunConfig(bench_repeats=1), workers=[1, 2])
        path = BenchService.write_outputs(rows, tmp_path)

        assert [r["solver"] for r in rows] == ["direct", "ieti", "ieti"]
        assert [r["workers"] for r in rows] == [1, 1, 2]
        assert rows[0]["rate"] is None and rows[1]["rate"] is None
        assert rows[2]["rate"] > 0.0
        assert rows[1]["iterations"] == rows[2]["iterations"]
        assert rows[0]["factor_nnz"] > 0
        assert all(r["dofs"] == 49 for r in rows)
        assert path.name == "bench.csv"

    @pytest.mark.parametrize("workers", [[0], [1, -2]])
    def test_invalid_workers(self, square_domain, app_settings, workers):
        with pytest.raises(ContractError):
            BenchService(app_settings).bench(square_domain, RunConfig(bench_repeats=1), workers=workers)

    def test_thread_variable_sets_default_workers(self, square_domain, monkeypatch):
        monkeypatch.setenv("IGA_SHAPEOPT_THREADS", "2")

        rows = BenchService(AppSettings()).bench(square_domain, RunConfig(bench_repeats=1))

        assert [r["workers"] for r in rows] == [1, 1, 2]

    def test_config_list_beats_thread_variable(self, square_domain):
        rows = BenchService(AppSettings(shapeopt_threads=8)).bench(
            square_domain, RunConfig(bench_repeats=1, bench_workers=[2])
        )

        assert [r["workers"] for r in rows] == [1, 2]


@pytest.mark.parametrize("threads, workers, expected", [
    (None, 1, [1, 2, 4]),
    (None, 3, [1, 2, 3]),
    (8, 1, [1, 2, 4, 8]),
    (6, 2, [1, 2, 4, 6]),
])
def test_bench_worker_counts(threads, workers, expected):
    assert bench_worker_counts(AppSettings(shapeopt_threads=threads, workers=workers)) == expected
