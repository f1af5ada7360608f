import csv
import json
import math

import numpy as np
import pytest

from lmmscore import cli, model
from lmmscore.model import CovarianceStructure, LmmDesign


@pytest.fixture
def one_way_files(tmp_path):
    rng = np.random.default_rng(90)
    m, size = 8, 3
    z = np.zeros((m * size, m))
    for i in range(m):
        z[i * size:(i + 1) * size, i] = 1.0
    design = LmmDesign(X=np.ones((m * size, 1)), Z=z,
                       structure=CovarianceStructure.iid(m))
    u = rng.standard_normal(m)
    y = 0.4 + z @ u + rng.standard_normal(m * size)
    model_path = tmp_path / "model.json"
    data_path = tmp_path / "y.csv"
    model.save_design(design, model_path)
    with open(data_path, "w") as fh:
        fh.write("y\n")
        fh.writelines(f"{v}\n" for v in y)
    return model_path, data_path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestFitCommand:
    def test_ml_report(self, one_way_files, tmp_path):
        model_path, data_path = one_way_files
        out = tmp_path / "fit.json"
        assert run(["fit", "--model", model_path, "--data", data_path,
                    "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["method"] == "ml" and report["converged"]
        assert len(report["psi_hat"]) == 2 and len(report["beta_hat"]) == 1
        assert report["psi_hat"][1] > 0

    def test_reml_report(self, one_way_files, tmp_path):
        model_path, data_path = one_way_files
        out = tmp_path / "fit.json"
        assert run(["fit", "--model", model_path, "--data", data_path,
                    "--reml", "--out", out]) == 0
        report = json.loads(out.read_text())
        assert report["method"] == "reml"
        assert report["loglik_kind"] == "restricted"

    def test_missing_file_numeric_error(self, tmp_path, capsys):
        out = tmp_path / "fit.json"
        code = run(["fit", "--model", tmp_path / "none.json",
                    "--data", tmp_path / "none.csv", "--out", out])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert "error" in err and "message" in err
        side = out.with_suffix(".error.json")
        assert side.exists() and json.loads(side.read_text())["error"]

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["fit", "--model"])  # missing value
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            run(["no-such-command"])
        assert exc.value.code == 2


class TestRegionCommand:
    def test_json_and_csv(self, one_way_files, tmp_path):
        model_path, data_path = one_way_files
        out = tmp_path / "region.json"
        csv_path = tmp_path / "region.csv"
        assert run(["region", "--model", model_path, "--data", data_path,
                    "--stat", "rscr", "--box", "0:2,0.2:2", "--res", "4,4",
                    "--out", out, "--csv", csv_path]) == 0
        report = json.loads(out.read_text())
        assert report["statistic"] == "rscr" and len(report["member"]) == 16
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["psi1", "psi2", "statistic", "feasible", "member"]
        assert len(rows) == 17


class TestDiagnoseBounds:
    def test_crossed_and_cluster(self, tmp_path):
        out = tmp_path / "bounds.json"
        assert run(["diagnose-bounds", "--crossed", "10,10",
                    "--cluster-m", "500", "--c2", "3", "--psi", "0,0,0,1",
                    "--out", out]) == 0
        report = json.loads(out.read_text())
        assert abs(report["crossed_bound"] - math.sqrt(19 / 81)) < 1e-9
        assert abs(report["crossed_bound_restricted"] - math.sqrt(0.125)) < 1e-9
        assert abs(report["cluster_bound"]
                   - 3 * math.sqrt(2) / math.sqrt(500)) < 1e-9

    def test_model_sup_a(self, one_way_files, tmp_path):
        model_path, _ = one_way_files
        out = tmp_path / "bounds.json"
        assert run(["diagnose-bounds", "--model", model_path,
                    "--psi", "0.5,1.0", "--v", "1,0", "--samples", "50",
                    "--out", out]) == 0
        report = json.loads(out.read_text())
        assert 0 < report["sup_a_estimate"] <= 1
        assert report["a_ratio"]["a"] <= report["separable_bound"] + 1e-12

    def test_empty_request_fails(self):
        assert run(["diagnose-bounds"]) == 1


class TestCoverageCommand:
    def test_example1_with_figure(self, tmp_path):
        out = tmp_path / "cov.csv"
        assert run(["coverage", "--scenario", "example1", "--n", "100",
                    "--stat", "score,wald", "--probes", "0.5", "--reps", "400",
                    "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "scenario" and len(rows) == 3
        assert (tmp_path / "cov.png").exists()

    def test_no_plot(self, tmp_path):
        out = tmp_path / "cov.csv"
        assert run(["coverage", "--scenario", "example1", "--n", "100",
                    "--stat", "score", "--probes", "1.0", "--reps", "200",
                    "--out", out, "--no-plot"]) == 0
        assert not (tmp_path / "cov.png").exists()

    def test_reruns_identical(self, tmp_path):
        args = ["coverage", "--scenario", "example1", "--n", "80",
                "--stat", "score", "--probes", "0.2", "--reps", "200",
                "--no-plot", "--seed", "5"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(args + ["--out", a]) == 0
        assert run(args + ["--out", b]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_crossed_flag_spelling(self, tmp_path):
        out = tmp_path / "cov.csv"
        assert run(["coverage", "--scenario", "crossed", "--crossed", "5,5",
                    "--stat", "rscr", "--probes", "0.0", "--reps", "150",
                    "--out", out, "--no-plot"]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[1][0] == "crossed-intercepts"


class TestQuantilesCommand:
    def test_quantiles_csv_and_figure(self, tmp_path):
        out = tmp_path / "q.csv"
        assert run(["quantiles", "--scenario", "example1", "--n", "100",
                    "--stat", "score,lrt", "--reps", "1000",
                    "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["level", "statistic", "empirical", "reference"]
        assert len(rows) == 1 + 2 * 99
        assert (tmp_path / "q.png").exists()


class TestExample1Command:
    def test_table(self, tmp_path):
        out = tmp_path / "e1.csv"
        assert run(["example1", "--n", "400", "--psi-scaled", "0",
                    "--reps", "2000", "--out", out]) == 0
        with open(out) as fh:
            table = dict(csv.reader(fh))
        del table["quantity"]
        assert set(table) == {"psi", "ks_w_score", "ks_w_wald", "ks_t_lrt",
                              "boundary_frequency"}
        assert abs(float(table["boundary_frequency"]) - 0.5) < 0.05


def test_load_y_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y\n1.0\nnot-a-number\n")
    with pytest.raises(ValueError):
        cli._load_y(str(path))


def test_thread_flag_accepted(tmp_path):
    out = tmp_path / "cov.csv"
    assert run(["coverage", "--scenario", "example1", "--n", "50",
                "--stat", "score", "--probes", "0.0", "--reps", "150",
                "--threads", "1", "--out", out, "--no-plot"]) == 0
