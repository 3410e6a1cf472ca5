import json
import os

import numpy as np
import pytest

from spenv import cli


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return cli.main(list(argv))


def simulate_small(workdir, n=49, scenario=1, seed=0):
    code = run("simulate", "--scenario", str(scenario), "--n", str(n),
               "--seed", str(seed))
    assert code == 0
    return workdir / "sim_data.csv"


RESP = "y1,y2,y3,y4,y5"
COVS = "x1,x2,x3,x4,x5,x6"


class TestSimulate:
    def test_writes_data_and_truth(self, workdir):
        simulate_small(workdir)
        truth = json.loads((workdir / "sim_truth.json").read_text())
        assert truth["schema_version"] == cli.SCHEMA_VERSION
        assert np.asarray(truth["beta"]).shape == (5, 6)
        header = (workdir / "sim_data.csv").read_text().splitlines()[0]
        assert header.split(",")[:3] == ["coord1", "coord2", "y1"]

    def test_seed_reproducible(self, workdir):
        run("simulate", "--n", "36", "--seed", "9", "--out-data", "a.csv",
            "--out-truth", "a.json")
        run("simulate", "--n", "36", "--seed", "9", "--out-data", "b.csv",
            "--out-truth", "b.json")
        assert (workdir / "a.csv").read_text() == (workdir / "b.csv").read_text()


class TestFit:
    def test_fit_writes_report(self, workdir, capsys):
        data = simulate_small(workdir)
        code = run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--u", "2", "--no-spatial")
        assert code == 0
        out = capsys.readouterr().out
        assert "loglik" in out
        report = json.loads((workdir / "fit_report.json").read_text())
        assert report["schema_version"] == cli.SCHEMA_VERSION
        assert report["u"] == 2
        assert report["theta"] is None
        assert np.asarray(report["beta"]).shape == (5, 6)

    def test_spatial_fit_reports_theta(self, workdir, capsys):
        data = simulate_small(workdir, n=64, scenario=2)
        code = run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--u", "2")
        assert code == 0
        assert "range=" in capsys.readouterr().out
        report = json.loads((workdir / "fit_report.json").read_text())
        assert report["theta"]["range"] > 0

    def test_roundtrip_through_report(self, workdir):
        data = simulate_small(workdir)
        run("fit", str(data), "--response-cols", RESP,
            "--covariate-cols", COVS, "--u", "2", "--no-spatial")
        fitres, ds = cli.report_to_fit(
            cli.load_report(str(workdir / "fit_report.json")))
        assert ds.n == 49
        assert fitres.params.gamma1.shape == (5, 2)
        # projection property survives serialization
        p1 = fitres.params.gamma1 @ fitres.params.gamma1.T
        assert np.allclose(p1 @ fitres.beta, fitres.beta, atol=1e-8)

    def test_select_u(self, workdir, capsys):
        data = simulate_small(workdir, n=64)
        code = run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--select-u", "--no-spatial",
                   "--folds", "3")
        assert code == 0
        out = capsys.readouterr().out
        assert "<-- selected" in out

    def test_requires_u_or_selection(self, workdir, capsys):
        data = simulate_small(workdir)
        code = run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS)
        assert code == cli.EXIT_USER
        assert "provide --u" in capsys.readouterr().err

    def test_u_out_of_range(self, workdir):
        data = simulate_small(workdir)
        assert run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--u", "9") == cli.EXIT_USER

    def test_missing_column(self, workdir, capsys):
        data = simulate_small(workdir)
        code = run("fit", str(data), "--response-cols", "y1,nope",
                   "--covariate-cols", COVS, "--u", "1")
        assert code == cli.EXIT_USER
        assert "missing columns" in capsys.readouterr().err

    def test_unparsable_cell(self, workdir, capsys):
        path = workdir / "bad.csv"
        path.write_text("coord1,coord2,y1\n0,0,1.0\n0,1,oops\n1,0,2\n")
        code = run("fit", str(path), "--response-cols", "y1",
                   "--covariate-cols", "", "--u", "1", "--no-spatial")
        assert code == cli.EXIT_USER
        assert "row 3" in capsys.readouterr().err


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_win(self, workdir):
        data = simulate_small(workdir)
        (workdir / "cfg.yaml").write_text(
            "u_value: 1\nno_spatial: true\nout_path: from_config.json\n")
        assert run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--config", "cfg.yaml") == 0
        assert json.loads((workdir / "from_config.json").read_text())["u"] == 1
        # explicit flag overrides the config value
        assert run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--config", "cfg.yaml",
                   "--u", "2") == 0
        assert json.loads((workdir / "from_config.json").read_text())["u"] == 2

    def test_unknown_config_key(self, workdir, capsys):
        data = simulate_small(workdir)
        (workdir / "cfg.yaml").write_text("bogus_key: 1\n")
        code = run("fit", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--u", "1",
                   "--config", "cfg.yaml")
        assert code == cli.EXIT_USER
        assert "unknown config keys" in capsys.readouterr().err


class TestPredict:
    def _fit(self, workdir, spatial=False):
        data = simulate_small(workdir, n=49, scenario=2 if spatial else 1)
        args = ["fit", str(data), "--response-cols", RESP,
                "--covariate-cols", COVS, "--u", "2"]
        if not spatial:
            args.append("--no-spatial")
        assert run(*args) == 0
        return workdir / "fit_report.json"

    def test_predict_at_sites(self, workdir):
        report = self._fit(workdir)
        sites = workdir / "sites.csv"
        sites.write_text("coord1,coord2\n0.1,0.2\n0.5,0.5\n0.9,0.1\n")
        assert run("predict", "--report", str(report), "--sites",
                   str(sites)) == 0
        lines = (workdir / "predictions.csv").read_text().splitlines()
        assert lines[0].split(",")[:4] == ["coord1", "coord2", "pred_y1",
                                           "sd_y1"]
        assert len(lines) == 4

    def test_predict_grid(self, workdir):
        report = self._fit(workdir, spatial=True)
        assert run("predict", "--report", str(report), "--grid", "0,0,1,1",
                   "--resolution", "5", "--out", "surface.csv") == 0
        assert len((workdir / "surface.csv").read_text().splitlines()) == 26

    def test_requires_one_target(self, workdir):
        report = self._fit(workdir)
        assert run("predict", "--report", str(report)) == cli.EXIT_USER
        assert run("predict", "--report", str(report), "--sites", "a.csv",
                   "--grid", "0,0,1,1") == cli.EXIT_USER

    def test_bad_grid_spec(self, workdir):
        report = self._fit(workdir)
        assert run("predict", "--report", str(report),
                   "--grid", "0,0,1") == cli.EXIT_USER

    def test_rejects_wrong_schema(self, workdir):
        (workdir / "old.json").write_text(json.dumps({"schema_version": 99}))
        assert run("predict", "--report", "old.json",
                   "--grid", "0,0,1,1") == cli.EXIT_USER


class TestCompareAndDiagnose:
    def test_compare_outputs(self, workdir, capsys):
        code = run("compare", "--n", "36", "--reps", "1", "--scenario", "1",
                   "--methods", "mlr,env")
        assert code == 0
        out = capsys.readouterr().out
        assert "mlr" in out and "lcm" in out
        table = json.loads((workdir / "compare.json").read_text())
        assert [row["method"] for row in table["rows"]] == ["mlr", "env",
                                                            "lcm"]
        lines = (workdir / "compare.csv").read_text().splitlines()
        assert lines[0] == "method,mean_mspe,sd_mspe,n_fail,note"

    def test_compare_unknown_method(self, workdir):
        assert run("compare", "--methods", "mlr,krige") == cli.EXIT_USER

    def test_diagnose_outputs(self, workdir, capsys):
        data = simulate_small(workdir, n=49, scenario=3)
        code = run("diagnose", str(data), "--response-cols", RESP,
                   "--covariate-cols", COVS, "--bins", "8")
        assert code == 0
        moran = (workdir / "diagnostics_moran.csv").read_text().splitlines()
        assert moran[0] == "response,observed,expected,sd,p_value"
        assert len(moran) == 6
        vg = (workdir / "diagnostics_variogram.csv").read_text().splitlines()
        assert len(vg) == 1 + 5 * 8


class TestHelpers:
    def test_atomic_write_replaces(self, workdir):
        path = workdir / "out.txt"
        cli.atomic_write(str(path), "one")
        cli.atomic_write(str(path), "two")
        assert path.read_text() == "two"
        assert [p for p in os.listdir(workdir)
                if p.startswith(".tmp-")] == []

    def test_version_flag(self, workdir):
        assert run("--version") == 0
