import json

import numpy as np
import pandas as pd
import pytest

from src.main import build_parser, main, resolve_config
from src.models.data import FrontierFit
from src.models.schemas import Estimator, Technology
from src.services.qp import NumericalFailure

def run(*argv) -> int:
    return main([str(a) for a in argv])

@pytest.fixture
def plant_args(fixture_csv, fixture_schema):
    return ["--input", fixture_csv, "--schema", fixture_schema]

# ---------------------- SUMMARY AND DIRECTION ----------------------

def test_summary_prints_statistics(tmp_path, capsys, plant_args):
    code = run("summary", *plant_args, "--out-dir", tmp_path)

    out = capsys.readouterr().out
    assert code == 0
    assert "electricity" in out
    assert "43202.95" in out
    assert (tmp_path / "summary.csv").exists()

def test_direction_prints_json(tmp_path, capsys, plant_args):
    code = run("direction", *plant_args, "--tech", "bp", "--out-dir", tmp_path)

    payload = json.loads(capsys.readouterr().out)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert code == 0
    assert payload["technology"] == "BP"
    assert payload["rule"] == "median"
    for key in ("g_x", "g_b", "g_y"):
        assert 1e-6 <= payload[key][0] <= 1.0
    assert manifest["outputs"] == ["direction.json", "manifest.json"]
    assert len(manifest["data_sha256"]) == 64

def test_wgd_direction_is_fixed(tmp_path, capsys, plant_args):
    run("direction", *plant_args, "--tech", "wgd", "--out-dir", tmp_path)

    payload = json.loads(capsys.readouterr().out)
    assert payload == {"technology": "WGD", "g_x": [1.0], "g_b": [1.0], "g_y": [1.0], "rule": "fixed_slack"}

# ---------------------- ESTIMATE ----------------------

def test_estimate_prices_every_plant(tmp_path, plant_args):
    code = run("estimate", *plant_args, "--tech", "bp", "--estimator", "cer", "--tau", "0.35,0.65",
               "--out-dir", tmp_path)

    records = pd.read_csv(tmp_path / "shadow_prices.csv")
    report = json.loads((tmp_path / "mac_report.json").read_text())
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert code == 0
    assert len(records) == 71
    assert list(records.columns) == ["dmu_id", "bracket", "mrt", "mp", "pmrt", "wmp", "mac", "strategy"]
    assert np.allclose(records["mac"], np.minimum(records["pmrt"], records["wmp"]))
    assert report["n_records"] == 71
    assert len(report["extremes"]) == 2
    assert manifest["n_records"] == 71
    assert manifest["outputs"] == ["shadow_prices.csv", "mac_report.json", "fits.csv", "manifest.json"]

def test_estimate_is_reproducible(tmp_path, plant_args):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert run("estimate", *plant_args, "--tech", "jd", "--tau", "0.2,0.8", "--out-dir", out) == 0

    for name in ("shadow_prices.csv", "fits.csv", "mac_report.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

def zero_slope_fit(d, tech, *args, **kwargs) -> FrontierFit:
    n = d.n_dmu
    return FrontierFit(
        technology=tech,
        estimator=Estimator.CNLS,
        dmu_ids=list(d.dmu_ids),
        alpha=np.zeros(n),
        beta=np.zeros((n, d.x_n.shape[1])),
        eta=np.ones((n, 1)),
        omega=np.ones((n, 1)),
        gamma=np.zeros((n, 1)),
        eps=np.zeros(n),
    )

def test_floored_slopes_are_counted(tmp_path, plant_args, mocker):
    mocker.patch("src.services.pipeline.fit_cnls", side_effect=zero_slope_fit)

    code = run("estimate", *plant_args, "--tech", "wgd", "--estimator", "cnls", "--out-dir", tmp_path)

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert code == 0
    assert manifest["floored_gamma"] == 71
    assert manifest["floored_eta"] == 0

def test_solver_failure_exits_incomplete(tmp_path, plant_args, mocker):
    mocker.patch("src.services.pipeline.fit_quantile_grid", side_effect=NumericalFailure("stalled"))

    assert run("estimate", *plant_args, "--tech", "jd", "--out-dir", tmp_path) == 1

def test_missing_input_is_invalid(tmp_path, fixture_schema, capsys):
    code = run("estimate", "--input", tmp_path / "absent.csv", "--schema", fixture_schema, "--out-dir", tmp_path)

    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 2
    assert error["error"] is True
    assert error["exit_code"] == 2

def test_out_of_range_tau_is_invalid(tmp_path, plant_args):
    assert run("estimate", *plant_args, "--tau", "1.5", "--out-dir", tmp_path) == 2

def test_estimate_needs_a_single_technology(tmp_path, plant_args):
    assert run("estimate", *plant_args, "--tech", "bp,jd", "--out-dir", tmp_path) == 2

# ---------------------- SIMULATE ----------------------

def test_oracle_simulation(tmp_path):
    code = run("simulate", "--oracle", "--reps", "1", "--n", "10", "--sigma", "0.3,1.3", "--tech", "bp,wgd",
               "--tau", "0.5", "--out-dir", tmp_path)

    table = pd.read_csv(tmp_path / "rmse_table.csv")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert code == 0
    assert list(table.columns) == ["scenario", "technology", "estimator", "tau", "metric", "sigma=0.3", "sigma=1.3"]
    assert len(table) == 4
    assert (table[["sigma=0.3", "sigma=1.3"]] == 0.0).all().all()
    assert manifest["incomplete"] == []
    assert manifest["outputs"] == ["rmse_table.csv", "rmse_tidy.csv", "rmse.json", "manifest.json"]

def test_simulation_files_repeat_with_the_seed(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        run("simulate", "--reps", "1", "--n", "8", "--sigma", "0.8", "--tech", "jd", "--estimator", "cnls",
            "--seed", "3", "--out-dir", out)

    for name in ("rmse_table.csv", "rmse_tidy.csv", "rmse.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

# ---------------------- CONFIGURATION ----------------------

def test_flags_override_config_file(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"seed": 5, "taus": [0.4, 0.2], "technology": "JD", "tol": 1e-7}))

    cfg = resolve_config(build_parser().parse_args(
        ["estimate", "--config", str(config), "--input", "plants.csv", "--seed", "9"]
    ))

    assert cfg.seed == 9
    assert cfg.taus == [0.2, 0.4]
    assert cfg.technology == Technology.JD
    assert cfg.tol == 1e-7

def test_settings_fill_unset_values():
    cfg = resolve_config(build_parser().parse_args(["simulate", "--tech", "jd,wgd", "--estimator", "cnls"]))

    assert cfg.technologies == [Technology.JD, Technology.WGD]
    assert cfg.estimators == [Estimator.CNLS]
    assert cfg.taus == [0.05, 0.20, 0.35, 0.50, 0.65, 0.80, 0.95]
