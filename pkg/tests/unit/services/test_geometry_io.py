import json

import numpy as np
import pytest

from api.models.schemas import GeometryFile, RunConfig
from api.services.benchmark_service import square_grid
from api.services.errors import ParseError, TopologyError
from api.services.geometry_io import (
    domain_to_geometry,
    geometry_json,
    geometry_to_domain,
    load_geometry,
    load_run_config,
    parse_geometry,
    save_geometry,
)


def minimal_doc(**overrides):
    doc = {
        "version": 1,
        "patches": [{
            "degree_u": 1,
            "degree_v": 1,
            "knots_u": [0, 0, 1, 1],
            "knots_v": [0, 0, 1, 1],
            "control_points": [[0, 0], [0, 1], [1, 0], [1, 1]],
        }],
        "materials": [{"patch": 0, "kind": "Air", "reluctivity": 1.0}],
        "dirichlet": [{"patch": 0, "side": 0}],
    }
    doc.update(overrides)
    return doc


def build(doc):
    return geometry_to_domain(parse_geometry(json.dumps(doc)))


class TestParsing:
    def test_minimal_document(self):
        domain = build(minimal_doc())

        assert domain.n_patches == 1
        assert domain.dirichlet_sides == ((0, 0),)
        assert domain.airgap_curve is None

    def test_malformed_json_reports_position(self):
        with pytest.raises(ParseError, match=r"<geometry>:1:\d+"):
            parse_geometry("{")

    def test_schema_violation_names_field(self):
        doc = minimal_doc(dirichlet=[{"patch": 0, "side": 7}])

        with pytest.raises(ParseError, match="dirichlet.0.side"):
            parse_geometry(json.dumps(doc))

    def test_unsupported_version(self):
        with pytest.raises(ParseError, match="version"):
            parse_geometry(json.dumps(minimal_doc(version=2)))

    def test_decreasing_knots(self):
        doc = minimal_doc()
        doc["patches"][0]["knots_u"] = [0, 1, 0, 1]

        with pytest.raises(ParseError, match="patches.0"):
            build(doc)

    def test_control_point_count(self):
        doc = minimal_doc()
        doc["patches"][0]["control_points"] = [[0, 0], [1, 1]]

        with pytest.raises(ParseError, match="patches.0"):
            build(doc)

    def test_missing_material(self):
        with pytest.raises(ParseError, match="no material"):
            build(minimal_doc(materials=[]))

    def test_duplicate_material(self):
        mat = {"patch": 0, "kind": "Air", "reluctivity": 1.0}

        with pytest.raises(ParseError, match="already has a material"):
            build(minimal_doc(materials=[mat, mat]))

    def test_magnet_without_magnetization(self):
        doc = minimal_doc(materials=[{"patch": 0, "kind": "Magnet", "reluctivity": 1.0}])

        with pytest.raises(ParseError, match="materials.0"):
            build(doc)

    def test_design_out_of_range(self):
        with pytest.raises(ParseError, match="design"):
            build(minimal_doc(design=[3]))

    def test_curve_on_unknown_patch(self):
        airgap = {"segments": [{"patch": 4, "axis": 0, "iso": 0.5, "start": 0, "end": 1}]}

        with pytest.raises(ParseError, match="airgap.segments.0.patch"):
            build(minimal_doc(airgap=airgap))

    def test_topology_errors_propagate(self):
        with pytest.raises(TopologyError):
            build(minimal_doc(dirichlet=[{"patch": 3, "side": 0}]))


class TestFiles:
    def test_round_trip_is_exact(self, tmp_path):
        domain = square_grid(2, level=1, degree=2)

        loaded = geometry_to_domain(load_geometry(save_geometry(domain, tmp_path / "g.json")))

        assert loaded.n_patches == domain.n_patches
        for a, b in zip(loaded.patches, domain.patches):
            np.testing.assert_array_equal(a.control_points, b.control_points)
            np.testing.assert_array_equal(a.kv_u.knots, b.kv_u.knots)
        assert loaded.dirichlet_sides == domain.dirichlet_sides
        assert len(loaded.interfaces) == len(domain.interfaces)

    def test_save_creates_directories(self, tmp_path):
        path = save_geometry(square_grid(1), tmp_path / "a" / "b" / "g.json")

        assert path.exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="Cannot read"):
            load_geometry(tmp_path / "absent.json")

    def test_geometry_json_omits_unset_fields(self):
        data = json.loads(geometry_json(domain_to_geometry(square_grid(1))))

        assert "airgap" not in data
        assert all("magnetization" not in m for m in data["materials"])

    def test_document_type(self):
        assert isinstance(domain_to_geometry(square_grid(1)), GeometryFile)


class TestRunConfig:
    def test_defaults_without_file(self):
        assert load_run_config(None) == RunConfig()

    def test_reads_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"solver": "ieti", "optimizer": {"algorithm": "bfgs"}}))

        config = load_run_config(path)

        assert config.solver == "ieti"
        assert config.optimizer.algorithm == "bfgs"

    def test_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"sovler": "ieti"}))

        with pytest.raises(ParseError, match="sovler"):
            load_run_config(path)
