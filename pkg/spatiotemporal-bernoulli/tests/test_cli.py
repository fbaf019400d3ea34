import json

import joblib
import pandas as pd
import pytest

from app import main
from data.serialize import load_panel, load_params
from models.model import ModelSpec


@pytest.fixture
def panel_path(tmp_path):
    path = tmp_path / "panel.bpnl"
    code = main(["simulate", "--scenario", "single_state", "--K", "2", "--M", "1", "--d", "1",
                 "--N", "800", "--seed", "3", "--output", str(path),
                 "--params-output", str(tmp_path / "truth.json")])
    assert code == 0
    return path


def test_simulate_writes_panel_and_truth(panel_path, tmp_path):
    panel = load_panel(panel_path)
    assert panel.spec == ModelSpec(2, 1, 1)
    assert panel.N == 800
    assert load_params(tmp_path / "truth.json").spec == panel.spec


def test_simulate_from_saved_params_is_seeded(panel_path, tmp_path):
    again = tmp_path / "again.bpnl"
    assert main(["simulate", "--params", str(tmp_path / "truth.json"), "--N", "800",
                 "--seed", "3", "--output", str(again)]) == 0
    assert again.read_bytes() == panel_path.read_bytes()


@pytest.mark.parametrize("method", ["ls", "ml"])
def test_estimate(panel_path, tmp_path, method):
    out = tmp_path / f"{method}.json"
    bundle = tmp_path / f"{method}.joblib"
    assert main(["estimate", "--panel", str(panel_path), "--method", method,
                 "--output", str(out), "--bundle", str(bundle)]) == 0
    beta = load_params(out, expected=ModelSpec(2, 1, 1))
    assert beta.values.shape == (10,)
    saved = joblib.load(bundle)
    assert saved["method"] == method
    assert saved["constraints"] == ["BasicPolytope", "ZeroMask"]


def test_estimate_with_constraint_file(panel_path, tmp_path):
    constraints = tmp_path / "constraints.json"
    constraints.write_text(json.dumps({"constraints": [{"atom": "basic"}, {"atom": "nonnegative_interactions"},
                                                       {"atom": "ground_mask"}]}), encoding="utf-8")
    out = tmp_path / "beta.json"
    assert main(["estimate", "--panel", str(panel_path), "--constraints", str(constraints),
                 "--output", str(out)]) == 0
    assert (load_params(out).interactions() >= -1e-8).all()


def test_bounds(panel_path, tmp_path):
    out = tmp_path / "bounds.json"
    assert main(["bounds", "--panel", str(panel_path), "--epsilon", "0.1", "--output", str(out)]) == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["kappa"] == 10
    assert set(payload["theta"]) == {"1", "2", "inf"}
    assert payload["theta"]["2"]["lower_bound"] is False
    assert payload["deviation"] > 0
    assert all(value > 0 for value in payload["risk"].values())
    assert set(payload["risk"]) == {"1", "2", "inf"}


def test_confint(panel_path, tmp_path):
    out = tmp_path / "ci.csv"
    assert main(["confint", "--panel", str(panel_path), "--level", "0.9",
                 "--coordinate", "0", "--coordinate", "5", "--output", str(out)]) == 0
    frame = pd.read_csv(out)
    assert frame["index"].tolist() == [0, 5]
    assert (frame["lower"] <= frame["upper"]).all()
    assert frame["feasible"].all()


def test_experiment(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps({
        "name": "tiny", "scenario": "single_state", "model": {"K": 2, "M": 1, "d": 1},
        "seed": 0, "N": 400, "replications": 2, "estimators": ["ls"],
        "constraints": [{"atom": "basic"}, {"atom": "ground_mask"}],
    }), encoding="utf-8")
    out = tmp_path / "report"
    assert main(["experiment", "--config", str(config), "--seed", "7", "--output-dir", str(out),
                 "--format", "csv", "json"]) == 0
    bundle = json.loads((out / "tiny_bundle.json").read_text(encoding="utf-8"))
    assert bundle["config"]["seed"] == 7
    assert len(bundle["records"]) == 2
    assert (out / "tiny_summary.csv").exists()
    assert (out / "tiny_params.svg").exists()


def test_ingest_and_cvdepth(tmp_path):
    events = tmp_path / "events.csv"
    pd.DataFrame({
        "timestamp": [i * 3600.0 + 10 for i in range(0, 60, 3)],
        "lat": [33.2] * 20,
        "lon": [-84.8, -84.2] * 10,
        "category": ["burglary", "robbery"] * 10,
    }).to_csv(events, index=False)
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "bbox": {"lat_min": 33.0, "lat_max": 34.0, "lon_min": -85.0, "lon_max": -84.0},
        "rows": 1, "cols": 2, "bin_seconds": 3600, "categories": {"burglary": 1, "robbery": 2},
        "start": 0, "end": 60 * 3600,
    }), encoding="utf-8")
    panel_path = tmp_path / "city.csv"
    report = tmp_path / "binning.json"
    assert main(["ingest", "--events", str(events), "--grid", str(grid), "--output", str(panel_path),
                 "--report", str(report)]) == 0
    panel = load_panel(panel_path)
    assert panel.spec == ModelSpec(2, 2, 0)
    assert panel.omega.sum() == 10 * 1 + 10 * 2
    assert json.loads(report.read_text(encoding="utf-8"))["kept"] == 20

    scores = tmp_path / "depth.json"
    assert main(["cvdepth", "--panel", str(panel_path), "--depths", "0", "1", "40", "--seed", "1",
                 "--output", str(scores)]) == 0
    payload = json.loads(scores.read_text(encoding="utf-8"))
    assert payload["flagged"] == [40]
    assert payload["scores"]["40"] is None
    assert payload["chosen"] in (0, 1)


def test_errors_exit_with_one(tmp_path, capsys):
    assert main(["simulate", "--N", "10", "--seed", "0", "--output", str(tmp_path / "x.bpnl")]) == 1
    assert "Error" in capsys.readouterr().out
    assert main(["estimate", "--panel", str(tmp_path / "missing.bpnl"), "--output", str(tmp_path / "b.json")]) == 1
    with pytest.raises(SystemExit):
        main(["estimate"])


def test_invalid_dimensions_exit_with_one(tmp_path, capsys):
    code = main(["simulate", "--scenario", "single_state", "--K", "0", "--M", "1", "--d", "1",
                 "--N", "10", "--seed", "0", "--output", str(tmp_path / "x.bpnl")])
    assert code == 1
    assert "Invalid input" in capsys.readouterr().out
    assert not (tmp_path / "x.bpnl").exists()
