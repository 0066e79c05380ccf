import dataclasses
import subprocess
import sys

import numpy as np
import pytest

from momentsde import experiments as ex
from momentsde.cli import main
from momentsde.config import default_config, load_config, save_config
from momentsde.moments import read_moments
from momentsde.training import ConfigError
from momentsde.validation import read_summary

TINY = """[run]
case_id = {case}
[data]
n_replicates = 200
K = 5
ic_counts = {counts}
[train]
max_epochs = 2
hidden = 8 8
[eval]
resolution = 10
K_V = 3
kl_replicates = 500
"""
COUNTS = {"colloidal": "3 2", "lotka_volterra": "3 2", "sir": "2 2 2"}


def tiny_config(tmp_path, case="colloidal"):
    p = tmp_path / f"{case}.ini"
    p.write_text(TINY.format(case=case, counts=COUNTS[case]))
    return p


@pytest.fixture(scope="module")
def colloidal_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    out = tmp / "run"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["train", "--out", str(out)]) == 0
    assert main(["evaluate", "--out", str(out), "--kde"]) == 0
    return tmp, out


@pytest.mark.parametrize("case", ["colloidal", "lotka_volterra", "sir"])
@pytest.mark.parametrize("scale", ["desk", "paper"])
def test_config_round_trip(tmp_path, case, scale):
    cfg = default_config(case, scale).with_seed(7)
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_keys_are_case_sensitive(tmp_path):
    cfg = load_config(tiny_config(tmp_path))
    assert cfg.data.K == 5 and cfg.eval.K_V == 3
    assert cfg.train.hidden == (8, 8)
    assert cfg.data.ic_counts == (3, 2)


def test_with_seed_sets_every_seed():
    cfg = default_config("colloidal").with_seed(3)
    assert (cfg.data.seed, cfg.train.split_seed, cfg.train.init_seed, cfg.eval.kl_seed) == (
        3, 3, 3, 1003)


@pytest.mark.parametrize("text", [
    "[run]\ncase_id = pendulum\n",
    "[run]\ncase_id = colloidal\n[data]\nn_replicates = 1\n",
    "[run]\ncase_id = colloidal\n[data]\nbogus = 3\n",
    "[run]\ncase_id = colloidal\n[train]\npropagator = ekf\n",
    "[run]\ncase_id = colloidal\n[data]\nic_counts = 3\n",
    "[data]\nK = 3\n",
])
def test_bad_configs_raise(tmp_path, text):
    (tmp_path / "bad.ini").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")


def test_nested_solver_keys(tmp_path):
    (tmp_path / "c.ini").write_text(
        "[run]\ncase_id = colloidal\n[train]\nsolver.method = rk4\nsolver.substeps = 3\n"
        "ut.alpha = 0.5\n")
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.train.solver.method == "rk4" and cfg.train.solver.substeps == 3
    assert cfg.train.ut.alpha == 0.5


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "pendulum"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["generate", "colloidal", "--replicates", "1", "--out", str(tmp_path)]) == 1
    assert main(["train", "--out", str(tmp_path / "missing")]) == 1
    assert main(["evaluate"]) == 1
    cfg = tiny_config(tmp_path)
    assert main(["generate", "sir", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "run"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    (out / "moments.csv").write_text("garbage\n")
    assert main(["train", "--out", str(out)]) == 2


def test_run_directory_contents(colloidal_run):
    _, out = colloidal_run
    for name in ("config.ini", "moments.csv", "moments.csv.meta", "drift.ckpt",
                 "diffusion.ckpt", "history.csv", "train_summary.meta", "report/summary.ini",
                 "report/grid_g1.csv", "report/grid_g2.csv", "report/kl.csv", "report/kde.csv"):
        assert (out / name).exists(), name
    ds, meta = read_moments(out / "moments.csv")
    assert ds.n_groups == 6 and ds.n_records == 6 * 6
    assert meta["case_id"] == "colloidal"
    summary = read_summary(out / "report" / "summary.ini")
    assert set(summary["rmse"]) == {"g1", "g2"}
    assert float(summary["kl"]["validation_error"]) >= 0


def test_generate_is_byte_identical(colloidal_run, tmp_path):
    tmp, out = colloidal_run
    again = tmp_path / "again"
    assert main(["generate", "--config", str(tmp / "colloidal.ini"), "--out", str(again)]) == 0
    assert (again / "moments.csv").read_bytes() == (out / "moments.csv").read_bytes()
    other = tmp_path / "other"
    assert main(["generate", "--config", str(tmp / "colloidal.ini"), "--out", str(other),
                 "--seed", "1"]) == 0
    assert (other / "moments.csv").read_bytes() != (out / "moments.csv").read_bytes()


def test_truth_evaluation_has_zero_rmse(colloidal_run, capsys):
    _, out = colloidal_run
    assert main(["evaluate", "--out", str(out), "--truth", "--no-kl"]) == 0
    summary = read_summary(out / "report" / "summary.ini")
    assert all(float(v) == 0.0 for v in summary["rmse"].values())
    assert "rmse g1: 0" in capsys.readouterr().out


@pytest.mark.parametrize("case,n_ckpt,n_rmse", [("lotka_volterra", 2, 4), ("sir", 1, 1)])
def test_other_cases_end_to_end(tmp_path, case, n_ckpt, n_rmse):
    cfg = tiny_config(tmp_path, case)
    out = tmp_path / "run"
    assert main(["reproduce", case, "--config", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("*.ckpt"))) == n_ckpt
    summary = read_summary(out / "report" / "summary.ini")
    assert len([k for k in summary["rmse"] if not k.startswith("rmse_effective")]) == n_rmse


def test_propagator_sweep(tmp_path):
    cfg = load_config(tiny_config(tmp_path))
    cfg = cfg.replace("train", max_epochs=1)
    rows = ex.run_sweep(cfg, "propagator", tmp_path / "sweep")
    assert [r["factor"] for r in rows] == ["linearization", "ut2m", "ut4m"]
    lines = (tmp_path / "sweep" / "sweep_propagator.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("factor,")


def test_sweep_settings():
    cfg = default_config("colloidal")
    assert [f for f, _ in ex.sweep_settings("replicates", cfg)] == [100, 1000, 10_000]
    st = ex.sweep_settings("sampling-time", cfg)
    assert [c.data.dt for _, c in st] == [1.0, 2.0, 3.0, 4.0]
    assert [c.data.record_every for _, c in st] == [1, 2, 3, 4]
    assert all(c.train.propagator == "ut4m" for _, c in st)
    with pytest.raises(ValueError):
        ex.sweep_settings("temperature", cfg)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "momentsde", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "reproduce" in r.stdout
