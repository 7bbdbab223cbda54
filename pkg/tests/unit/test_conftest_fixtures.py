import os

from api.controllers.simulation_controller import get_simulation_service
from api.services.geometry_io import load_geometry
from tests import conftest


def test_mock_env_vars_fixture(mock_env_vars, monkeypatch):
    mock_env_vars(MY_ENV="123")
    assert os.environ["MY_ENV"] == "123"


def test_test_client_fixture_installs_override(test_client):
    assert get_simulation_service in conftest.app.dependency_overrides


def test_app_settings_fixture(app_settings):
    assert app_settings.solver == "direct"
    assert app_settings.default_workers == 1


def test_square_domain_fixture(square_domain):
    assert square_domain.n_patches == 4
    assert len(square_domain.interfaces) == 4


def test_two_patch_domain_fixture(two_patch_domain):
    assert two_patch_domain.n_patches == 2
    assert two_patch_domain.dirichlet_sides == ((0, 0), (1, 1))


def test_geometry_file_fixture(geometry_file):
    assert geometry_file.exists()
    assert len(load_geometry(geometry_file).patches) == 4
