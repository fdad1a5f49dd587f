import csv
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from deformex.cli import ConfigError, config_hash, load_config, main, validate
from deformex.covariance import rho
from deformex.field_sim import load_gfd


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return lines[0], list(csv.reader(lines[1:]))


SHEAR = {"kind": "linear", "matrix": [[2.0, 1.0], [0.0, 1.0]]}
LINEAR_DOMAINS = [["hseg", 1.0, 0.0], ["vseg", 0.0, 1.0], ["rect", 1.0, 1.0]]


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.yaml", {"seed": 5, "grid": {"spacing": 0.5}}),
                          {"reps": 3, "out": None})
        assert cfg["seed"] == 5 and cfg["reps"] == 3
        assert cfg["grid"]["spacing"] == 0.5 and cfg["grid"]["upper"] == [10.0, 10.0]

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", {"sead": 5}))

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("a: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_hash_is_stable(self):
        a = load_config(None, {"seed": 1})
        b = load_config(None, {"seed": 1})
        assert config_hash(a) == config_hash(b) != config_hash(load_config(None, {"seed": 2}))
        assert config_hash(load_config(None, {"seed": 1, "out": "elsewhere"})) == config_hash(a)

    def test_validation_before_compute(self, tmp_path):
        cfg = load_config(None, {"out": str(tmp_path), "identify.method": "general", "identify.u": 0.0})
        cfg["partition"] = {"start": 0.2, "stop": 1.0, "step": 0.2}
        with pytest.raises(ConfigError):
            validate(cfg, "identify")
        cfg["identify"]["u"] = 1.0
        cfg["partition"] = [0.1, 0.2, 0.4, 0.5, 0.6]
        with pytest.raises(ConfigError):
            validate(cfg, "identify")

    def test_print_config(self, capsys):
        assert main(["simulate", "--print-config", "--seed", "9"]) == 0
        shown = yaml.safe_load(capsys.readouterr().out)
        assert shown["seed"] == 9 and "spiral" in shown


class TestSimulate:
    def test_deterministic_artifacts(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"grid": {"upper": [2.0, 2.0], "spacing": 0.25},
                                                 "levels": [0.0, 1.0], "deformation": SHEAR})
        for name in ("a", "b"):
            assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name),
                         "--seed", "3", "--reps", "2"]) == 0
        for f in ("field_0000.gfd", "field_0001.gfd", "simulate_summary.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        grid = load_gfd(tmp_path / "a" / "field_0001.gfd")
        assert grid.seed == 3 ^ 1 and grid.values.shape == (9, 9)
        comment, rows = read_rows(tmp_path / "a" / "simulate_summary.csv")
        assert "seed=3" in comment
        assert rows[0] == ["rep", "seed", "mean", "var", "min", "max", "chi_u=0.0", "chi_u=1.0"]
        assert len(rows) == 3

    def test_zero_reps_writes_summary_only(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--reps", "0"]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["simulate_summary.csv"]
        assert len(read_rows(tmp_path / "simulate_summary.csv")[1]) == 1


class TestTable:
    def test_analytic_example(self, tmp_path):
        assert main(["table", "--out", str(tmp_path)]) == 0
        _, rows = read_rows(tmp_path / "table.csv")
        assert rows[0] == ["domain_kind", "s", "t", "u", "mean_phi", "std_err", "n"]
        assert rows[1][0] == "rect"
        assert float(rows[1][4]) == pytest.approx(rho(2, 1.0), rel=1e-12)
        assert float(rows[1][5]) == 0.0

    def test_empty_domain_list(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"domains": []})
        assert main(["table", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        _, rows = read_rows(tmp_path / "table.csv")
        assert rows == [["domain_kind", "s", "t", "u", "mean_phi", "std_err", "n"]]

    def test_montecarlo(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"domains": [["rect", 2.0, 2.0]], "levels": [0.5]})
        assert main(["table", "--config", str(cfg), "--out", str(tmp_path), "--mode", "montecarlo",
                     "--reps", "20", "--seed", "1"]) == 0
        _, rows = read_rows(tmp_path / "table.csv")
        assert rows[1][6] == "20" and float(rows[1][5]) > 0

    def test_montecarlo_needs_reps(self, tmp_path):
        assert main(["table", "--out", str(tmp_path), "--mode", "montecarlo", "--reps", "1"]) == 2


class TestIdentify:
    def test_linear_report(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"deformation": SHEAR, "domains": LINEAR_DOMAINS})
        assert main(["table", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert main(["identify", "--config", str(cfg), "--out", str(tmp_path), "--method", "linear"]) == 0
        report = (tmp_path / "identify_report.txt").read_text()
        assert "a = 2 " in report and "b = 1.41421356237" in report and "c = 2 " in report
        assert report.count("representative") == 2 and "mu+" in report and "mu-" in report
        assert "config_hash: " in report
        _, rows = read_rows(tmp_path / "identify_linear.csv")
        assert float(rows[1][6]) == pytest.approx(0.2) and float(rows[1][7]) == pytest.approx(0.4)

    def test_general(self, tmp_path):
        part = {"start": 0.2, "stop": 1.0, "step": 0.2}
        cfg = write_config(tmp_path / "c.yaml", {"deformation": SHEAR, "partition": part})
        assert main(["table", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert main(["identify", "--config", str(cfg), "--out", str(tmp_path), "--method", "general"]) == 0
        _, rows = read_rows(tmp_path / "abc_field.csv")
        assert len(rows) == 1 + 25
        a = np.array([float(r[2]) for r in rows[1:]])
        np.testing.assert_allclose(a, 2.0, atol=1e-8)

    def test_general_at_zero_level_rejected(self, tmp_path):
        part = {"start": 0.2, "stop": 1.0, "step": 0.2}
        cfg = write_config(tmp_path / "c.yaml", {"partition": part})
        assert main(["identify", "--config", str(cfg), "--out", str(tmp_path), "--method", "general",
                     "--u", "0"]) == 2
        assert not (tmp_path / "abc_field.csv").exists()

    def test_tensorial_without_signs_warns(self, tmp_path):
        deform = {"kind": "tensorial", "theta1": "s**3/3 + s", "theta2": "2*t"}
        cfg = write_config(tmp_path / "c.yaml", {"deformation": deform,
                                                 "partition": {"start": 0.1, "stop": 1.0, "step": 0.1}})
        assert main(["table", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert main(["identify", "--config", str(cfg), "--out", str(tmp_path), "--method", "tensorial"]) == 0
        assert "signs not given" in (tmp_path / "identify_report.txt").read_text()
        _, rows = read_rows(tmp_path / "tensorial.csv")
        assert rows[1][5] == "nan"
        assert main(["identify", "--config", str(cfg), "--out", str(tmp_path), "--method", "tensorial",
                     "--signs", "++"]) == 0
        _, rows = read_rows(tmp_path / "tensorial.csv")
        s = np.array([float(r[0]) for r in rows[1:]])
        np.testing.assert_allclose([float(r[5]) for r in rows[1:]], s**3 / 3 + s, atol=1e-9)
        np.testing.assert_allclose([float(r[6]) for r in rows[1:]], 2 * s, atol=1e-9)

    def test_missing_table_is_io_error(self, tmp_path):
        assert main(["identify", "--out", str(tmp_path), "--table", str(tmp_path / "nope.csv")]) == 4

    def test_inconsistent_table_is_numeric_failure(self, tmp_path, capsys):
        path = tmp_path / "t.csv"
        path.write_text(
            "domain_kind,s,t,u,mean_phi,std_err,n\n"
            f"hseg,1.0,0.0,1.0,{rho(1, 1.0)!r},0.0,0\n"
            f"vseg,0.0,1.0,1.0,{rho(1, 1.0)!r},0.0,0\n"
            f"rect,1.0,1.0,1.0,{2 * rho(2, 1.0)!r},0.0,0\n"
        )
        assert main(["identify", "--out", str(tmp_path), "--table", str(path)]) == 3
        assert "identify" in capsys.readouterr().err


class TestIsotropy:
    def test_spiral_passes(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"deformation": {"kind": "spiral", "f": "r**2", "g": "sin(r)"}})
        assert main(["verify-isotropy", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert "verdict: PASS" in (tmp_path / "isotropy_report.txt").read_text()
        _, rows = read_rows(tmp_path / "isotropy.csv")
        assert rows[0] == ["angle", "expected_chi"] and len(rows) == 7

    def test_stretch_fails_with_worst_angle(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {
            "deformation": {"kind": "linear", "matrix": [[2.0, 0.0], [0.0, 1.0]]},
            "isotropy": {"angles": [0.1, math.pi / 4, 1.2], "rect": {"translation": [0.0, 0.0]}},
        })
        assert main(["verify-isotropy", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        report = (tmp_path / "isotropy_report.txt").read_text()
        assert "verdict: FAIL" in report
        assert f"worst angle: {math.pi / 4!r}" in report


class TestSpiral:
    def test_small_run_writes_all_artifacts(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", {"spiral": {"schedule": [8, 12, 16, 24], "u": 0.5}})
        rc = main(["estimate-spiral", "--config", str(cfg), "--out", str(tmp_path), "--reps", "30",
                   "--seed", "1000"])
        assert rc in (0, 3)  # 30 replications may not give a positive slope
        _, rows = read_rows(tmp_path / "spiral_estimate.csv")
        assert rows[0] == ["N", "mean_Z", "var_Z", "area_T0", "est_detjac", "normalized_var"]
        assert [r[0] for r in rows[1:]] == ["8", "12", "16", "24"]
        if rc == 0:
            _, plot = read_rows(tmp_path / "spiral_plot.csv")
            assert plot[0] == ["x", "y", "yerr"]
            assert "estimate" in (tmp_path / "spiral_report.txt").read_text()

    def test_y_estimator_deterministic(self, tmp_path):
        args = ["estimate-spiral", "--estimator", "Y", "--u", "0", "--reps", "40", "--seed", "77",
                "--schedule", "8,12,16,24"]
        codes = [main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
        assert codes[0] == codes[1]
        assert ((tmp_path / "a" / "spiral_estimate.csv").read_bytes()
                == (tmp_path / "b" / "spiral_estimate.csv").read_bytes())

    def test_zero_level_rejected_for_z(self, tmp_path):
        assert main(["estimate-spiral", "--out", str(tmp_path), "--u", "0"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "deformex.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "table", "identify", "estimate-spiral", "verify-isotropy"):
        assert cmd in out.stdout


def test_unwritable_output_is_rejected(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--out", str(blocker / "sub")]) in (2, 4)
