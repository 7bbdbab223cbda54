import csv
import json

import pytest

from api.config.settings_base import AppSettings
from api.services.geometry_io import save_geometry
from client import cli
from tests.conftest import make_domain
from tests.unit.services.test_shape_optimization import channel_domain
from tests.unit.services.test_spline_geometry import folded_patch


@pytest.fixture(autouse=True)
def pinned_settings(monkeypatch):
    settings = AppSettings(solver="direct", workers=1, log_level="WARNING")
    monkeypatch.setattr(cli, "get_settings", lambda: settings)
    return settings


def write_config(tmp_path, **config):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return str(path)


class TestGenerate:
    def test_to_stdout(self, capsys):
        assert cli.main(["generate", "--kind", "square_grid", "--n", "2"]) == 0

        doc = json.loads(capsys.readouterr().out)
        assert len(doc["patches"]) == 4

    def test_to_file(self, tmp_path):
        out = tmp_path / "geo" / "motor.json"

        assert cli.main(["generate", "--kind", "motor_like", "--out", str(out)]) == 0

        doc = json.loads(out.read_text())
        assert len(doc["patches"]) == 72
        assert doc["design"] == [24, 27, 30, 33]


class TestSimulate:
    def test_manufactured(self, geometry_file, tmp_path, capsys):
        out = tmp_path / "run"

        code = cli.main(["simulate", "--geometry", str(geometry_file), "--out", str(out), "--manufactured"])

        assert code == 0
        stdout = capsys.readouterr().out
        assert "dofs=49" in stdout
        assert "L2_error=" in stdout
        assert (out / "coefficients.csv").exists()
        assert len(list((out / "vtk").glob("*.vtk"))) == 4

    def test_missing_geometry_file(self, tmp_path, capsys):
        code = cli.main(["simulate", "--geometry", str(tmp_path / "absent.json"), "--out", str(tmp_path)])

        assert code == 2
        assert "Cannot read" in capsys.readouterr().err

    def test_malformed_config(self, geometry_file, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{\n  \"solver\": ")

        code = cli.main(["simulate", "--geometry", str(geometry_file), "--config", str(bad), "--out", str(tmp_path)])

        assert code == 2

    def test_folded_geometry(self, tmp_path):
        path = save_geometry(make_domain([folded_patch()]), tmp_path / "fold.json")

        assert cli.main(["simulate", "--geometry", str(path), "--out", str(tmp_path)]) == 4

    def test_worker_list_needs_bench(self, geometry_file, tmp_path):
        code = cli.main(["simulate", "--geometry", str(geometry_file), "--workers", "1,2", "--out", str(tmp_path)])

        assert code == 1

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate"])

        assert exc.value.code == 2


class TestOptimize:
    def test_zero_iterations_keeps_geometry(self, tmp_path, capsys):
        geometry = save_geometry(channel_domain(), tmp_path / "channel.json")
        config = write_config(tmp_path, current_density=[1.0, 0.0, 0.0], optimizer={"max_iterations": 0})
        out = tmp_path / "opt"

        code = cli.main(["optimize", "--geometry", str(geometry), "--config", config, "--out", str(out), "--seed", "7"])

        assert code == 0
        assert (out / "final_geometry.json").read_text() == geometry.read_text()
        assert "iterations=0" in capsys.readouterr().out
        with open(out / "history.csv", newline="") as fp:
            assert len(list(csv.reader(fp))) == 2


class TestBench:
    def test_table(self, geometry_file, tmp_path, capsys):
        config = write_config(tmp_path, bench_repeats=1)
        out = tmp_path / "bench"

        code = cli.main(["bench", "--geometry", str(geometry_file), "--config", config,
                         "--workers", "1,2", "--out", str(out)])

        assert code == 0
        with open(out / "bench.csv", newline="") as fp:
            rows = list(csv.DictReader(fp))
        assert [r["solver"] for r in rows] == ["direct", "ieti", "ieti"]
        assert rows[1]["rate"] == ""
        assert "rate=--" in capsys.readouterr().out
