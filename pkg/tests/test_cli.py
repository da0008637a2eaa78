import csv

import numpy as np
import pytest

from thermoehm import driver as dr
from thermoehm.cli import main

PROGRAM = """[program]
output_stride = 4
[segment.1]
duration = 96
increments = 8
control = E S S S S S
rate = 8.33e-5 0 0 0 0 0
T_start = 300
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["rve", "--dims", "4", "4", "4", "--grains", "3", "--seed", "2",
                 "--beta-fraction", "0", "--out", str(d / "r.rve")]) == 0
    assert main(["precompute", "--rve", str(d / "r.rve"), "--mat", "demo", "--temps", "295", "473",
                 "--out", str(d / "c.ehmc")]) == 0
    (d / "p.cfg").write_text(PROGRAM)
    return d


def test_run_and_fip(workdir, capsys):
    d = workdir
    assert main(["run", "--program", str(d / "p.cfg"), "--rve", str(d / "r.rve"), "--mat", "demo",
                 "--cache", str(d / "c.ehmc"), "--out", str(d / "run"), "--point", "x"]) == 0
    assert "8 increments" in capsys.readouterr().out
    assert main(["fip", "--snapshots", str(d / "run"), "--rve", str(d / "r.rve"),
                 "--out", str(d / "fip.csv")]) == 0
    with open(d / "fip.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["point"] for r in rows] == ["x", "x"]
    assert float(rows[0]["time"]) < float(rows[1]["time"])
    assert all(float(r["delta_rho_tot_max"]) >= 0 for r in rows)


def test_batch_exit_code(workdir):
    d = workdir
    (d / "b.cfg").write_text("[batch]\nprogram = p.cfg\nrve = r.rve\ncache = c.ehmc\nmat = demo\n"
                             "[point.a]\nT = 310\n[point.b]\nT = 1000\n")
    assert main(["batch", "--spec", str(d / "b.cfg"), "--out", str(d / "batch")]) == 1
    with open(d / "batch" / "summary.csv") as fh:
        status = {r["point"]: r["status"] for r in csv.DictReader(fh)}
    assert status == {"a": "ok", "b": "failed"}


def test_oracle_matches_schema(workdir):
    d = workdir
    assert main(["oracle", "--rve", str(d / "r.rve"), "--program", str(d / "p.cfg"), "--mat", "demo",
                 "--out", str(d / "ff")]) == 0
    cols, h = dr.read_history(d / "ff" / "history.csv")
    cols_r, h_r = dr.read_history(d / "run" / "history.csv")
    assert cols == cols_r and h.shape == h_r.shape
    assert np.allclose(h[:, 2], h_r[:, 2])


def test_calibrate_writes_fit(workdir, capsys):
    d = workdir
    exp = d / "exp"
    exp.mkdir()
    curve = dr.ExperimentCurve("t300", 300.0, 8.33e-5, np.array([0.002, 0.004]), np.array([300.0, 500.0]))
    dr.write_experiment(exp / "t300.csv", curve)
    (d / "bounds.cfg").write_text("[bounds]\nk1.basal = 1e7 3e7\n")
    assert main(["calibrate", "--exp", str(exp), "--free", "k1.basal", "--bounds", str(d / "bounds.cfg"),
                 "--rve", str(d / "r.rve"), "--cache", str(d / "c.ehmc"), "--mat", "demo",
                 "--max-evals", "3", "--out", str(d / "fit.csv")]) == 0
    out = capsys.readouterr().out
    assert "k1.basal" in out and "evaluations = 3" in out
    assert (d / "fit.csv").exists()


def test_missing_bounds_is_an_error(workdir):
    d = workdir
    (d / "nb.cfg").write_text("[bounds]\n")
    assert main(["calibrate", "--exp", str(d / "exp"), "--free", "k1.basal", "--bounds", str(d / "nb.cfg"),
                 "--rve", str(d / "r.rve"), "--cache", str(d / "c.ehmc")]) == 2


def test_missing_file(tmp_path):
    assert main(["run", "--program", str(tmp_path / "no.cfg"), "--rve", str(tmp_path / "no.rve"),
                 "--cache", str(tmp_path / "no.ehmc"), "--out", str(tmp_path)]) == 2
