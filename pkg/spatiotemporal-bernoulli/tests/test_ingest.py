import numpy as np
import pandas as pd
import pytest

from data.ingest import GridSpec, ingest_events, panel_to_events
from errors import ConfigError, IngestError
from models.model import EventPanel, ModelSpec

CATEGORIES = (("burglary", 1), ("robbery", 2))


@pytest.fixture
def grid():
    return GridSpec(lat_min=33.0, lat_max=34.0, lon_min=-85.0, lon_max=-84.0, rows=2, cols=3,
                    bin_seconds=3600.0, categories=CATEGORIES)


def write_events(path, rows):
    pd.DataFrame(rows, columns=["timestamp", "lat", "lon", "category"]).to_csv(path, index=False)
    return path


def test_cells_are_row_major_from_south_west(grid):
    cells = grid.cell_of(np.array([33.1, 33.1, 33.9, 34.0]), np.array([-84.9, -84.1, -84.9, -84.0]))
    assert cells.tolist() == [0, 2, 3, 5]


def test_single_event(grid, tmp_path):
    path = write_events(tmp_path / "events.csv", [["2020-01-01T00:10:00", 33.1, -84.1, "robbery"]])
    panel, report = ingest_events(path, grid)
    assert panel.omega.shape == (1, 6)
    assert panel.omega[0].tolist() == [0, 0, 2, 0, 0, 0]
    assert report.kept == 1 and report.conserved()


def test_empty_file_gives_one_empty_bin(grid, tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    panel, report = ingest_events(path, grid, depth=2)
    assert panel.omega.shape == (3, 6)
    assert not panel.omega.any()
    assert report.total_rows == 0


def test_collisions_keep_earliest_event(grid, tmp_path):
    path = write_events(tmp_path / "events.csv", [
        [1800.0, 33.1, -84.9, "robbery"],
        [600.0, 33.2, -84.8, "burglary"],
        [4000.0, 33.1, -84.9, "robbery"],
        [100.0, 35.0, -84.9, "robbery"],
    ])
    grid = GridSpec(33.0, 34.0, -85.0, -84.0, 2, 3, 3600.0, CATEGORIES, start=0.0)
    panel, report = ingest_events(path, grid)
    assert panel.omega[:, 0].tolist() == [1, 2]
    assert (report.kept, report.collisions, report.out_of_box) == (2, 1, 1)
    assert report.conserved()


def test_window_filter(tmp_path):
    grid = GridSpec(33.0, 34.0, -85.0, -84.0, 1, 1, 10.0, CATEGORIES, start=100.0, end=130.0)
    path = write_events(tmp_path / "events.csv", [
        [95.0, 33.5, -84.5, "robbery"],
        [105.0, 33.5, -84.5, "robbery"],
        [129.0, 33.5, -84.5, "burglary"],
        [130.0, 33.5, -84.5, "burglary"],
    ])
    panel, report = ingest_events(path, grid)
    assert panel.omega[:, 0].tolist() == [2, 0, 1]
    assert report.outside_window == 2
    assert report.n_bins == 3


def test_round_trip_through_event_table(grid, tmp_path, make_panel):
    spec = ModelSpec(grid.K, grid.M, 0)
    panel = make_panel(spec, 40)
    events = panel_to_events(panel, grid, start=1000.0)
    path = tmp_path / "events.csv"
    events.to_csv(path, index=False)
    bounded = GridSpec(33.0, 34.0, -85.0, -84.0, 2, 3, 3600.0, CATEGORIES,
                       start=1000.0, end=1000.0 + 3600.0 * panel.N)
    rebuilt, report = ingest_events(path, bounded)
    assert np.array_equal(rebuilt.omega, panel.omega)
    assert report.collisions == 0 and report.conserved()


def test_depth_sets_initial_rows(grid, tmp_path):
    path = write_events(tmp_path / "events.csv", [[0.0, 33.1, -84.9, "burglary"], [7300.0, 33.1, -84.9, "robbery"]])
    panel, _ = ingest_events(path, grid, depth=1)
    assert isinstance(panel, EventPanel)
    assert panel.spec.d == 1 and panel.N == 2
    assert panel.window(1).tolist() == [[1, 0, 0, 0, 0, 0]]


def test_errors_name_the_line(grid, tmp_path):
    path = write_events(tmp_path / "events.csv", [
        [0.0, 33.1, -84.9, "burglary"],
        [10.0, 33.1, -84.9, "arson"],
    ])
    with pytest.raises(IngestError, match="line 3.*arson"):
        ingest_events(path, grid)

    path = write_events(tmp_path / "bad_time.csv", [["not-a-time", 33.1, -84.9, "burglary"]])
    with pytest.raises(IngestError, match="line 2"):
        ingest_events(path, grid)

    path = tmp_path / "columns.csv"
    path.write_text("time,lat,lon\n0,33,-84\n", encoding="utf-8")
    with pytest.raises(IngestError, match="missing columns"):
        ingest_events(path, grid)


def test_grid_validation_and_json(tmp_path, grid):
    with pytest.raises(ConfigError):
        GridSpec(34.0, 33.0, -85.0, -84.0, 1, 1, 10.0, CATEGORIES)
    with pytest.raises(ConfigError):
        GridSpec(33.0, 34.0, -85.0, -84.0, 1, 1, 10.0, (("a", 1), ("b", 3)))
    with pytest.raises(ConfigError):
        GridSpec.from_dict({"rows": 1})

    restored = GridSpec.from_dict(grid.to_dict())
    assert restored == grid
    assert GridSpec.from_dict({**grid.to_dict(), "start": "1970-01-01T00:01:00Z"}).start == 60.0
