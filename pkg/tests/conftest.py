"""Shared pytest fixtures and configuration."""

from typing import Optional, Sequence

import numpy as np
import pytest
from fastapi.testclient import TestClient

from api.config.settings_base import AppSettings
from api.controllers.simulation_controller import get_simulation_service
from api.main import app
from api.services.benchmark_service import motor_like, square_grid
from api.services.geometry_io import save_geometry
from api.services.multipatch_topology import (
    AirGapCurve,
    MaterialKind,
    MaterialTag,
    MultiPatchDomain,
    build_topology,
)
from api.services.simulation_service import SimulationService
from api.services.spline_geometry import KnotVector, Patch


def unit_patch(degree: int = 1, n_spans: int = 1, origin=(0.0, 0.0), size: float = 1.0) -> Patch:
    """Identity-like square patch with control points on the Greville grid."""
    kv = KnotVector.uniform(degree, n_spans)
    g = kv.greville
    xs = origin[0] + size * g
    ys = origin[1] + size * g
    net = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    return Patch.from_net(kv, kv, net)


def unit_materials(n: int, nu: float = 1.0) -> list[MaterialTag]:
    return [MaterialTag(MaterialKind.AIR, nu)] * n


def make_domain(
    patches: Sequence[Patch],
    dirichlet: Sequence[tuple[int, int]] = (),
    design: Sequence[int] = (),
    curve: Optional[AirGapCurve] = None,
    materials: Optional[Sequence[MaterialTag]] = None,
) -> MultiPatchDomain:
    return build_topology(patches, materials or unit_materials(len(patches)), dirichlet, design, curve)


def strip_domain(n: int = 2, degree: int = 1, n_spans: int = 2) -> MultiPatchDomain:
    """n unit squares in a row; Dirichlet only on the far left and far right sides."""
    patches = [unit_patch(degree, n_spans, origin=(float(i), 0.0)) for i in range(n)]
    return make_domain(patches, dirichlet=[(0, 0), (n - 1, 1)])


@pytest.fixture
def app_settings():
    """Settings with library defaults, independent of APP_ENV."""
    return AppSettings(solver="direct", workers=1, log_level="INFO")


@pytest.fixture
def square_domain():
    return square_grid(2, level=1, degree=2)


@pytest.fixture
def two_patch_domain():
    return strip_domain(2)


@pytest.fixture(scope="session")
def motor_domain():
    """Level-0 motor benchmark, shared across tests (domains are immutable)."""
    return motor_like(0)


@pytest.fixture
def geometry_file(tmp_path):
    """Square-grid geometry written to disk."""
    return save_geometry(square_grid(2, level=1, degree=2), tmp_path / "square.json")


@pytest.fixture
def test_client(app_settings):
    """Provide a test client with settings pinned to the direct solver."""
    app.dependency_overrides[get_simulation_service] = lambda: SimulationService(app_settings)
    client = TestClient(app)
    try:
        yield client
    finally:
        app.dependency_overrides.clear()


@pytest.fixture
def mock_env_vars(monkeypatch):
    """Provide mock environment variables."""
    def set_env(**kwargs):
        for key, value in kwargs.items():
            monkeypatch.setenv(key, str(value))
    return set_env
