import csv
import io
import json

import pytest

from bsee_control.cli import main


def run_cli(*argv):
    buf = io.StringIO()
    code = main(list(argv), stream=buf)
    return code, buf.getvalue()


def test_list():
    code, out = run_cli("list")
    assert code == 0 and "lq_closed_form" in out


@pytest.mark.parametrize("name", ["lq_tree_unit", "lq_perturbed", "parabolic_tree"])
def test_solve_valid(name, tmp_path):
    code, out = run_cli("solve", name, "--out", str(tmp_path))
    assert code == 0, out
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "pass" and rep["failed"] == []
    assert (tmp_path / "timings.json").exists()
    with open(tmp_path / "trajectories.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "x", "node", "y", "z", "k", "u"]


@pytest.mark.parametrize("name, check", [("lq_broken_N", "LQ_positivity"),
                                          ("lq_broken_monotone", "A4_monotonicity"),
                                          ("parabolic_broken_kappa", "super_parabolic")])
def test_broken_configs_exit_4(name, check, tmp_path):
    code, out = run_cli("solve", name, "--out", str(tmp_path))
    assert code == 4
    rep = json.loads((tmp_path / "report.json").read_text())
    assert check in rep["failed"]
    assert "witness" in out


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: lq-abstract\ntime: {horizon: 1, steps: 2}\nfoo: 1\n")
    assert run_cli("solve", str(bad), "--out", str(tmp_path))[0] == 2
    assert run_cli("solve", "nope", "--out", str(tmp_path))[0] == 2
    big = tmp_path / "big.yaml"
    big.write_text("problem: lq-abstract\nmode: tree\ntime: {horizon: 1, steps: 20}\n")
    code, out = run_cli("solve", str(big), "--out", str(tmp_path))
    assert code == 2 and "cap" in out


def test_check_single_suite(tmp_path):
    code, out = run_cli("check", "lq_tree_unit", "--suite", "duality", "--out", str(tmp_path))
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["suites"] == ["duality"]
    assert all(c["name"].startswith("duality") for c in rep["checks"])


def test_sweep_csv(tmp_path):
    code, out = run_cli("sweep", "lq_closed_form", "--levels", "32,64,128", "--out", str(tmp_path))
    assert code == 0, out
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["level"] for r in rows] == ["32", "64", "128"]
    assert rows[0]["order"] == ""
    assert abs(float(rows[2]["order"]) - 1.0) < 0.1


def test_sweep_bad_levels(tmp_path):
    assert run_cli("sweep", "lq_closed_form", "--levels", "32", "--out", str(tmp_path))[0] == 2
    assert run_cli("sweep", "lq_closed_form", "--levels", "a,b", "--out", str(tmp_path))[0] == 2


def test_reports_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("solve", "lq_random_coeffs", "--out", str(a))
    run_cli("solve", "lq_random_coeffs", "--out", str(b))
    for f in ("report.json", "trajectories.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_override_changes_nothing_for_deterministic_data(tmp_path):
    code, _ = run_cli("solve", "lq_tree_unit", "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    assert json.loads((tmp_path / "report.json").read_text())["config"]["seed"] == 3
