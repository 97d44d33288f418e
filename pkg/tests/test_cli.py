import csv
import json
import subprocess
import sys

import pytest

from sdae_nmpc.cli import INTEGRATE_COLUMNS, TRAJECTORY_COLUMNS, main

SMALL = ["--set", "ocp.N=5", "--set", "ocp.horizon=20.0", "--total-steps", "3"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--seed", "5"] + SMALL) == 0
    return out


def test_trajectory_header_is_fixed(sim_dir):
    header, _ = read_csv(sim_dir / "trajectory_seed5.csv")
    assert header == ["t_min", "T_true", "T_in_true", "U_cell", "I", "T_measured", "T_hat",
                      "T_in_hat", "P_T", "P_T_in", "f_in", "z_bar", "sqp_iterations"]
    assert tuple(header) == TRAJECTORY_COLUMNS


def test_trajectory_has_one_row_per_instant(sim_dir):
    _, rows = read_csv(sim_dir / "trajectory_seed5.csv")
    assert len(rows) == 3 + 1
    assert [float(r[0]) for r in rows] == [0.0, 4.0, 8.0, 12.0]
    f_in = [float(r[10]) for r in rows[:-1]]
    assert all(2.0 <= f <= 10.0 for f in f_in)
    # final instant: state and prediction only
    assert rows[-1][5] == "" and rows[-1][10] == "" and rows[-1][12] == ""


def test_summary_contents(sim_dir):
    summary = json.loads((sim_dir / "summary_seed5.json").read_text())
    assert summary["seed"] == 5
    assert summary["constraint_violations"] == 0
    assert summary["steps"] == 3
    assert (sim_dir / "scenario.yaml").exists()


def test_reruns_are_byte_identical(sim_dir, tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--seed", "5"] + SMALL) == 0
    for name in ("trajectory_seed5.csv", "summary_seed5.json"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def test_seed_is_irrelevant_without_noise(tmp_path):
    args = ["simulate", "--out", str(tmp_path), "--seed", "1,2", "--sigma", "0",
            "--measurement-noise", "0"] + SMALL
    assert main(args) == 0
    _, a = read_csv(tmp_path / "trajectory_seed1.csv")
    _, b = read_csv(tmp_path / "trajectory_seed2.csv")
    assert a == b
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seeds"] == [1, 2]


def test_integrate_and_solve_ocp(tmp_path):
    assert main(["integrate", "--out", str(tmp_path), "--intervals", "2",
                 "--method", "esdirk23"]) == 0
    header, rows = read_csv(tmp_path / "integrate.csv")
    assert tuple(header) == INTEGRATE_COLUMNS and len(rows) == 3
    sens = json.loads((tmp_path / "sensitivities.json").read_text())
    assert sens["method"] == "ESDIRK23" and len(sens["intervals"]) == 2
    assert len(sens["intervals"][0]["ds_ds0"]) == 4
    assert main(["solve-ocp", "--out", str(tmp_path), "--set", "ocp.N=5",
                 "--set", "ocp.horizon=20.0"]) == 0
    summary = json.loads((tmp_path / "ocp_summary.json").read_text())
    assert summary["converged"]
    assert 2.0 <= summary["u0"][0] <= 10.0


@pytest.mark.parametrize("extra", [
    ["--set", "foo=1"],
    ["--set", "ocp.N"],
    ["--set", "ocp.N=0"],
    ["--seed", "a,b"],
    ["--scenario", "/nonexistent/scenario.yaml"],
])
def test_bad_input_exits_with_usage_code(extra, tmp_path):
    assert main(["simulate", "--out", str(tmp_path)] + extra) == 2


def test_console_entry_point_reports_usage_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sdae_nmpc.cli", "simulate", "--out",
                           str(tmp_path), "--set", "colour=blue"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "unknown key" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "sdae_nmpc.cli", "bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
