import csv
import json
from pathlib import Path

import pytest

from mclt_sgd import cli

ROOT = Path(__file__).resolve().parents[1]
BUNDLED = ROOT / "configs" / "rademacher_n12.json"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_config(tmp_path, **overrides):
    cfg = json.loads(BUNDLED.read_text())
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestRun:
    def test_bundled_config(self, tmp_path):
        out = tmp_path / "a.csv"
        assert cli.main(["run", str(BUNDLED), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 36
        assert all(float(r["gap"]) <= float(r["thm1"]) for r in rows)
        meta = json.loads(Path(str(out) + ".meta.json").read_text())
        assert {"config_sha256", "seed", "version", "runtime_seconds"} <= set(meta)
        assert rows[0]["config_sha256"] == meta["config_sha256"]

    def test_byte_identical_rerun(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["run", str(BUNDLED), "--out", str(a)])
        cli.main(["run", str(BUNDLED), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_c3_out_of_range(self, tmp_path, capsys):
        cfg = json.loads((ROOT / "configs" / "linear_2d.json").read_text())
        cfg["schedule"]["c3"] = 1.5
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["run", str(path), "--out", str(tmp_path / "x.csv")]) == 1
        assert "c3 in (0, 1)" in capsys.readouterr().err
        assert not (tmp_path / "x.csv").exists()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, colour="blue")
        assert cli.main(["run", str(path), "--out", str(tmp_path / "x.csv")]) == 1
        assert "colour" in capsys.readouterr().err

    def test_unknown_function_rejected(self, tmp_path):
        path = write_config(tmp_path, functions=["tanh"])
        assert cli.main(["run", str(path), "--out", str(tmp_path / "x.csv")]) == 1

    def test_violation_exit_code(self, tmp_path, monkeypatch):
        import mclt_sgd.martingale as mg

        monkeypatch.setattr(mg, "THREE_PI_8", 1e-9)
        path = write_config(tmp_path, bounds=["thm1"], horizons=[2], functions=["cos"])
        out = tmp_path / "v.csv"
        assert cli.main(["run", str(path), "--out", str(out)]) == 2
        assert read_csv(out)[0]["certified"] == "false"

    def test_json_output(self, tmp_path):
        path = write_config(tmp_path, horizons=[3], output={"format": "json"})
        out = tmp_path / "r.json"
        assert cli.main(["run", str(path), "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["rows"]) == 3 and doc["meta"]["seed"] == 0

    def test_discrepancy_overrides(self, tmp_path):
        cfg = {"schema_version": 1, "experiment": "lin", "engine": "linear", "problem": "linear_1d",
               "schedule": {"eta0": 0.5, "c3": 0.6}, "functions": ["cos"], "horizons": [50],
               "reps": 10, "seed": 0, "bounds": ["thm3", "cor4"]}
        path = tmp_path / "lin.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "d.csv"
        assert cli.main(["discrepancy", "--experiment", str(path), "--reps", "500", "--seed", "4",
                         "--out", str(out)]) == 0
        row = read_csv(out)[0]
        assert (row["reps"], row["seed"]) == ("500", "4")
        assert float(row["thm3"]) > 0 and row["thm1"] == "nan"


class TestSweep:
    def sweep(self, tmp_path, axis, values):
        path = write_config(tmp_path, method="monte_carlo", reps=200, horizons=[64],
                            functions=["cos"], bounds=["cor1"])
        out = tmp_path / "s.csv"
        code = cli.main(["sweep", "--config", str(path), "--axis", axis, "--values", values,
                         "--out", str(out)])
        slopes = {r["column"]: r for r in read_csv(tmp_path / "s.slopes.csv")}
        return code, read_csv(out), slopes

    def test_horizon_slope(self, tmp_path):
        code, rows, slopes = self.sweep(tmp_path, "horizon", "64,256,1024,4096")
        assert code == 0 and len(rows) == 4
        assert float(slopes["cor1"]["slope"]) == pytest.approx(-0.5, abs=1e-10)
        assert "gap" in slopes

    def test_dim_slope(self, tmp_path):
        _, _, slopes = self.sweep(tmp_path, "dim", "1,2,4")
        assert float(slopes["cor1"]["slope"]) == pytest.approx(2.0, abs=1e-10)


class TestOtherCommands:
    def test_mclt(self, tmp_path):
        out = tmp_path / "m.csv"
        assert cli.main(["mclt", "--model", "iid_rademacher", "--horizon", "8", "--reps", "5000",
                         "--out", str(out)]) == 0
        row = read_csv(out)[0]
        assert list(row)[:11] == ["model", "d", "n", "function", "empirical_gap", "gap_stderr",
                                  "thm1", "cor1", "cor2", "p1_dev", "seed"]
        assert float(row["empirical_gap"]) <= float(row["thm1"])

    @pytest.mark.parametrize("record,rows", [("summary", 3 * 3), ("full", 3 * 100)])
    def test_simulate(self, tmp_path, record, rows):
        out = tmp_path / "sim.csv"
        assert cli.main(["simulate-linear", "--problem", "linear_2d", "--horizon", "100", "--reps", "3",
                         "--record", record, "--out", str(out)]) == 0
        data = read_csv(out)
        assert len(data) == rows
        assert list(data[0])[:4] == ["rep", "t", "norm_delta", "norm_delta_bar"]

    def test_simulate_linear_rejects_nonquadratic(self, tmp_path):
        assert cli.main(["simulate-linear", "--problem", "logcosh_ridge_2d", "--horizon", "10",
                         "--out", str(tmp_path / "x.csv")]) == 1
        assert cli.main(["simulate-sgd", "--problem", "logcosh_ridge_2d", "--horizon", "10",
                         "--out", str(tmp_path / "x.csv")]) == 0

    def test_simulate_problem_file(self, tmp_path):
        spec = {"kind": "quadratic", "A": [[2.0]], "b": [1.0],
                "noise": {"kind": "scaled_rademacher", "cov": [[0.5]]}}
        path = tmp_path / "p.json"
        path.write_text(json.dumps(spec))
        assert cli.main(["simulate-linear", "--problem", str(path), "--horizon", "10",
                         "--out", str(tmp_path / "x.csv")]) == 0

    @pytest.mark.parametrize("which", ["rho", "thm3", "cor4", "thm4"])
    def test_bounds(self, tmp_path, which):
        out = tmp_path / "b.csv"
        assert cli.main(["bounds", "--which", which, "--problem", "linear_2d", "--horizon-grid",
                         "100,1000", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [r["t"] for r in rows] == ["100", "1000"]
        assert all(float(r["total"]) > 0 for r in rows)

    def test_bounds_constants_file(self, tmp_path):
        consts = tmp_path / "c.json"
        consts.write_text(json.dumps({"K": 1, "K2": 2, "Cprime": 1, "c1": 1, "c2": 0.5, "lam": 1}))
        out = tmp_path / "b.csv"
        assert cli.main(["bounds", "--which", "thm3", "--problem", "linear_1d", "--horizon-grid", "10",
                         "--constants", "file", "--constants-file", str(consts), "--out", str(out)]) == 0

    def test_stein_check(self, capsys):
        assert cli.main(["stein-check", "--function", "cos", "--dim", "1", "--step", "0.2"]) == 0
        assert capsys.readouterr().out.count("true") == 2

    def test_list_functions(self, capsys):
        assert cli.main(["list-functions", "--dim", "2"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "name,family,dim,m1,m2"
        assert any(line.startswith("half_square,quadratic,2,inf") for line in out)

    def test_thread_env_overrides_flag(self, monkeypatch):
        monkeypatch.setenv("MCLT_SGD_THREADS", "3")
        assert cli.resolve_threads(8) == 3
        monkeypatch.delenv("MCLT_SGD_THREADS")
        assert cli.resolve_threads(8) == 8
