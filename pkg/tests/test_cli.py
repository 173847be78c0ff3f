import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from homcar.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_OK, load_config, main, model_labels

SMALL_MCMC = ["--chains", "2", "--burn-in", "300", "--samples", "600", "--thinning", "3"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture
def p3_files(tmp_path):
    edges = tmp_path / "edges.csv"
    edges.write_text("a,b\nb,c\n")
    return edges


class TestVarianceProfile:
    def test_p3(self, tmp_path, p3_files):
        out = tmp_path / "vp"
        assert main(["variance-profile", "--graph", str(p3_files), "--homcar", "--out", str(out)]) == EXIT_OK
        icar = rows(out / "variance_icar.csv")
        np.testing.assert_allclose([float(r["variance"]) for r in icar], [5 / 9, 2 / 9, 5 / 9], atol=1e-12)
        hom = [float(r["variance"]) for r in rows(out / "variance_homcar.csv")]
        np.testing.assert_allclose(hom, [53 / 45, 4 / 9, 53 / 45], atol=1e-12)
        con = [float(r["variance"]) for r in rows(out / "variance_homcar_constrained.csv")]
        np.testing.assert_allclose(con, 1.0, atol=1e-12)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["icar"]["max_min_ratio"] == pytest.approx(2.5)
        assert "sha256" in json.dumps(json.loads((out / "manifest.json").read_text()))

    def test_two_nodes(self, tmp_path):
        edges = tmp_path / "e.csv"
        edges.write_text("x,y\n")
        out = tmp_path / "vp"
        assert main(["variance-profile", "--graph", str(edges), "--out", str(out)]) == EXIT_OK
        np.testing.assert_allclose([float(r["variance"]) for r in rows(out / "variance_icar.csv")], 0.25)

    def test_lattice(self, tmp_path, capsys):
        assert main(["variance-profile", "--lattice", "4x4", "--out", str(tmp_path / "l")]) == EXIT_OK
        assert "icar: min=" in capsys.readouterr().out

    def test_disconnected_uses_pseudoinverse(self, tmp_path):
        edges = tmp_path / "e.csv"
        edges.write_text("a,b\nc,d\n")
        out = tmp_path / "o"
        assert main(["variance-profile", "--graph", str(edges), "--out", str(out)]) == EXIT_OK
        np.testing.assert_allclose([float(r["variance"]) for r in rows(out / "variance_icar.csv")], 0.25)

    def test_missing_file(self, tmp_path):
        assert main(["variance-profile", "--graph", str(tmp_path / "nope.csv")]) == EXIT_INPUT

    def test_no_graph(self):
        assert main(["variance-profile"]) == EXIT_INPUT


class TestSimulate:
    def test_byte_identical_reruns(self, tmp_path):
        args = ["simulate", "--lattice", "5x5", "--replicates", "3", "--delta", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        for name in ("rep_0000.csv", "rep_0002.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        doc = json.loads((tmp_path / "a" / "scenario.json").read_text())
        assert doc["delta"] == 2.0 and len(doc["seeds"]) == 3

    def test_single_replicate_matches(self, tmp_path):
        base = ["simulate", "--lattice", "5x5", "--replicates", "4"]
        main(base + ["--out", str(tmp_path / "all")])
        main(base + ["--replicate", "2", "--out", str(tmp_path / "one")])
        assert not (tmp_path / "one" / "rep_0000.csv").exists()
        assert (tmp_path / "one" / "rep_0002.csv").read_bytes() == (tmp_path / "all" / "rep_0002.csv").read_bytes()

    def test_zero_replicates(self, tmp_path):
        assert main(["simulate", "--lattice", "3x3", "--replicates", "0", "--out", str(tmp_path)]) == EXIT_INPUT

    def test_config_file(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"graph.lattice": "3x3", "scenario.replicates": 2, "output.dir": "sim"}))
        assert main(["simulate", "--config", str(conf)]) == EXIT_OK
        assert (tmp_path / "sim" / "rep_0001.csv").exists()

    def test_unknown_key(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"graph.latice": "3x3"}))
        assert main(["simulate", "--config", str(conf)]) == EXIT_INPUT


class TestConfig:
    def test_flags_win(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"scenario.replicates": 7}))
        assert load_config(str(conf), {"scenario.replicates": 3})["scenario.replicates"] == 3
        assert load_config(str(conf), {"scenario.replicates": None})["scenario.replicates"] == 7

    def test_model_labels(self):
        assert model_labels("icar,homcar,icar") == [("icar", "icar"), ("homcar", "homcar"), ("icar_2", "icar")]
        assert model_labels(["a=icar"]) == [("a", "icar")]


class TestFit:
    def test_fit_outputs(self, tmp_path, p3_files):
        counts = tmp_path / "counts.csv"
        counts.write_text("unit_id,count,expected\nc,9,3\na,1,3\nb,4,3\n")
        out = tmp_path / "fit"
        code = main(["fit", "--graph", str(p3_files), "--counts", str(counts), "--draws",
                     "--out", str(out)] + SMALL_MCMC)
        assert code in (EXIT_OK, EXIT_CONVERGENCE)
        eta = rows(out / "eta_summary.csv")
        assert [r["unit_id"] for r in eta] == ["a", "b", "c"]
        assert float(eta[2]["eta_mean"]) > float(eta[0]["eta_mean"])
        crit = json.loads((out / "criteria.json").read_text())
        assert set(crit) >= {"dic", "waic"}
        assert (out / "draws.csv").exists()
        conv = json.loads((out / "convergence.json").read_text())
        assert (code == EXIT_OK) == conv["converged"]

    def test_unknown_unit(self, tmp_path, p3_files):
        counts = tmp_path / "counts.csv"
        counts.write_text("unit_id,count\na,1\nz,4\nc,2\n")
        assert main(["fit", "--graph", str(p3_files), "--counts", str(counts), "--expected", "2",
                     "--out", str(tmp_path / "f")] + SMALL_MCMC) == EXIT_INPUT

    def test_missing_expected(self, tmp_path, p3_files):
        counts = tmp_path / "counts.csv"
        counts.write_text("unit_id,count\na,1\nb,4\nc,2\n")
        assert main(["fit", "--graph", str(p3_files), "--counts", str(counts),
                     "--out", str(tmp_path / "f")] + SMALL_MCMC) == EXIT_INPUT


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    code = main(["experiment", "--lattice", "4x4", "--replicates", "3", "--models", "icar,homcar,icar",
                 "--name", "smoke", "--out", str(out)] + SMALL_MCMC)
    return code, out / "smoke"


class TestExperiment:
    def test_exit_code(self, experiment_dir):
        assert experiment_dir[0] in (EXIT_OK, EXIT_CONVERGENCE)

    def test_layout(self, experiment_dir):
        root = experiment_dir[1]
        for name in ("summary.csv", "metrics_table.csv", "correlations.json", "variance_maps.csv",
                     "variance_histogram.csv", "status.json", "manifest.json"):
            assert (root / name).exists(), name
        assert sorted(p.name for p in (root / "icar").iterdir()) == ["0000", "0001", "0002"]
        assert json.loads((root / "status.json").read_text())["complete"]

    def test_metrics_table_shape(self, experiment_dir):
        table = rows(experiment_dir[1] / "metrics_table.csv")
        assert [(r["model"], r["aggregation"]) for r in table] == [
            ("icar", "sum"), ("homcar", "sum"), ("icar_2", "sum"),
            ("icar", "mean"), ("homcar", "mean"), ("icar_2", "mean")]

    def test_duplicate_models_identical(self, experiment_dir):
        table = rows(experiment_dir[1] / "metrics_table.csv")
        a = {k: v for k, v in table[0].items() if k != "model"}
        b = {k: v for k, v in table[2].items() if k != "model"}
        assert a == b

    def test_variance_maps(self, experiment_dir):
        maps = rows(experiment_dir[1] / "variance_maps.csv")
        assert len(maps) == 16
        assert {"unit_id", "icar_prior_variance", "homcar_prior_variance", "relative_band"} <= set(maps[0])

    def test_reaggregate_is_identical(self, experiment_dir):
        root = experiment_dir[1]
        before = (root / "metrics_table.csv").read_bytes()
        assert main(["metrics", "--experiment", str(root)]) == EXIT_OK
        assert (root / "metrics_table.csv").read_bytes() == before

    def test_single_fit_metrics(self, experiment_dir, tmp_path):
        root = experiment_dir[1]
        out = tmp_path / "report.txt"
        assert main(["metrics", "--fit", str(root / "homcar" / "0001"),
                     "--truth", str(root / "data" / "rep_0001.csv"), "--model", "homcar",
                     "--out", str(out)]) == EXIT_OK
        text = out.read_text()
        assert "model=homcar\n" in text and "rmse=" in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "homcar", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()


def test_no_command():
    res = subprocess.run([sys.executable, "-m", "homcar"], capture_output=True, text=True)
    assert res.returncode == EXIT_INPUT
