"""
Bin geo-referenced event records onto a spatial grid and uniform time bins.

CSV columns: timestamp (ISO-8601 or epoch seconds), lat, lon, category.
Cells are numbered row-major from the south-west corner, so location
k = row * cols + col + 1. At most one event is kept per (bin, cell): the
earliest one, the rest count as collisions.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigError, IngestError
from models.model import EventPanel, LinkFunction, ModelSpec

logger = logging.getLogger(__name__)

COLUMNS = ("timestamp", "lat", "lon", "category")
EPOCH = pd.Timestamp("1970-01-01", tz="UTC")


def _to_epoch(value) -> float:
    """Epoch seconds from a number or an ISO-8601 string (naive means UTC)."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    try:
        seconds = float(text)
    except ValueError:
        pass
    else:
        if not math.isfinite(seconds):
            raise ValueError(f"non-finite timestamp {text!r}")
        return seconds
    stamp = pd.Timestamp(text)
    if pd.isna(stamp):
        raise ValueError(f"empty timestamp {text!r}")
    stamp = stamp.tz_localize("UTC") if stamp.tzinfo is None else stamp.tz_convert("UTC")
    return (stamp - EPOCH) / pd.Timedelta(seconds=1)


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int
    bin_seconds: float
    categories: Tuple[Tuple[str, int], ...]
    start: Optional[float] = None
    end: Optional[float] = None

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ConfigError(f"Empty bounding box: lat [{self.lat_min}, {self.lat_max}], "
                              f"lon [{self.lon_min}, {self.lon_max}]")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"Grid needs rows, cols >= 1, got {self.rows} x {self.cols}")
        if self.bin_seconds <= 0:
            raise ConfigError(f"Time-bin width must be positive, got {self.bin_seconds}")
        ids = sorted(i for _, i in self.categories)
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"Category ids must be dense 1..M, got {ids}")
        if self.start is not None and self.end is not None and self.end <= self.start:
            raise ConfigError(f"Window end {self.end} must follow start {self.start}")

    @property
    def K(self) -> int:
        return self.rows * self.cols

    @property
    def M(self) -> int:
        return len(self.categories)

    def category_map(self) -> Dict[str, int]:
        return dict(self.categories)

    def spec(self, depth: int = 0, link: LinkFunction = LinkFunction.IDENTITY) -> ModelSpec:
        return ModelSpec(self.K, self.M, depth, link)

    def cell_of(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        """0-based location index; points on the north / east edge fall in the last cell."""
        row = np.floor((np.asarray(lat) - self.lat_min) / (self.lat_max - self.lat_min) * self.rows)
        col = np.floor((np.asarray(lon) - self.lon_min) / (self.lon_max - self.lon_min) * self.cols)
        row = np.clip(row, 0, self.rows - 1).astype(np.int64)
        col = np.clip(col, 0, self.cols - 1).astype(np.int64)
        return row * self.cols + col

    def inside(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        lat, lon = np.asarray(lat), np.asarray(lon)
        return (lat >= self.lat_min) & (lat <= self.lat_max) & (lon >= self.lon_min) & (lon <= self.lon_max)

    @classmethod
    def from_dict(cls, payload: dict) -> "GridSpec":
        try:
            bbox = payload["bbox"]
            categories = payload["categories"]
            return cls(
                lat_min=float(bbox["lat_min"]), lat_max=float(bbox["lat_max"]),
                lon_min=float(bbox["lon_min"]), lon_max=float(bbox["lon_max"]),
                rows=int(payload["rows"]), cols=int(payload["cols"]),
                bin_seconds=float(payload["bin_seconds"]),
                categories=tuple(sorted(((str(k), int(v)) for k, v in categories.items()), key=lambda c: c[1])),
                start=_to_epoch(payload["start"]) if payload.get("start") is not None else None,
                end=_to_epoch(payload["end"]) if payload.get("end") is not None else None,
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"Invalid grid definition: {e!r}") from e

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "GridSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e

    def to_dict(self) -> dict:
        return {
            "bbox": {"lat_min": self.lat_min, "lat_max": self.lat_max,
                     "lon_min": self.lon_min, "lon_max": self.lon_max},
            "rows": self.rows,
            "cols": self.cols,
            "bin_seconds": self.bin_seconds,
            "categories": self.category_map(),
            "start": self.start,
            "end": self.end,
        }


@dataclass(frozen=True)
class BinningReport:
    total_rows: int
    kept: int
    collisions: int
    out_of_box: int
    outside_window: int
    n_bins: int
    start: Optional[float]

    def conserved(self) -> bool:
        return self.kept + self.collisions + self.out_of_box + self.outside_window == self.total_rows


def _read_events(csv_path: Union[str, Path]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(COLUMNS))
    except FileNotFoundError as e:
        raise IngestError(f"Event file not found: {csv_path}") from e
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise IngestError(f"{csv_path}: missing columns {missing}, expected {list(COLUMNS)}")
    return frame[list(COLUMNS)]


def _parse(frame: pd.DataFrame, grid: GridSpec, csv_path) -> pd.DataFrame:
    """Typed columns; the first bad row raises with its file line number."""
    categories = grid.category_map()
    times = np.empty(len(frame))
    for i, value in enumerate(frame["timestamp"]):
        try:
            times[i] = _to_epoch(value)
        except (ValueError, TypeError) as e:
            raise IngestError(f"{csv_path}, line {i + 2}: unparseable timestamp {value!r}") from e
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=float)
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(lat) | np.isnan(lon))
    if bad.size:
        i = int(bad[0])
        raise IngestError(f"{csv_path}, line {i + 2}: unparseable coordinates "
                          f"({frame['lat'].iloc[i]!r}, {frame['lon'].iloc[i]!r})")
    codes = np.empty(len(frame), dtype=np.int64)
    for i, name in enumerate(frame["category"]):
        code = categories.get(str(name).strip())
        if code is None:
            raise IngestError(f"{csv_path}, line {i + 2}: unknown category {name!r}; "
                              f"dictionary is {categories}")
        codes[i] = code
    return pd.DataFrame({"time": times, "lat": lat, "lon": lon, "category": codes, "order": np.arange(len(frame))})


def ingest_events(csv_path: Union[str, Path], grid: GridSpec, depth: int = 0,
                  link: LinkFunction = LinkFunction.IDENTITY) -> Tuple[EventPanel, BinningReport]:
    """
    Build an event panel from a CSV of events

    The first `depth` time bins become the panel's initial segment.

    Args:
        csv_path: event CSV with a header row
        grid: spatial grid, bin width and category dictionary
        depth: memory depth of the returned panel's spec

    Returns:
        (EventPanel, BinningReport)

    Raises:
        IngestError: unparseable row, unknown category, or too few bins for the depth
    """
    events = _parse(_read_events(csv_path), grid, csv_path)
    total = len(events)

    inside = grid.inside(events["lat"].to_numpy(), events["lon"].to_numpy())
    out_of_box = int((~inside).sum())
    events = events[inside]

    start = grid.start
    if start is None:
        start = float(events["time"].min()) if len(events) else 0.0
    in_window = events["time"].to_numpy() >= start
    if grid.end is not None:
        in_window &= events["time"].to_numpy() < grid.end
    outside_window = int((~in_window).sum())
    events = events[in_window]

    if grid.end is not None:
        n_bins = int(math.ceil((grid.end - start) / grid.bin_seconds))
    elif len(events):
        n_bins = int((events["time"].max() - start) // grid.bin_seconds) + 1
    else:
        n_bins = 1
    n_bins = max(n_bins, depth + 1)

    events = events.assign(
        bin=((events["time"] - start) // grid.bin_seconds).astype(np.int64),
        cell=grid.cell_of(events["lat"].to_numpy(), events["lon"].to_numpy()),
    )
    ordered = events.sort_values(["time", "order"], kind="mergesort")
    kept = ordered.drop_duplicates(subset=["bin", "cell"], keep="first")
    collisions = len(ordered) - len(kept)

    omega = np.zeros((n_bins, grid.K), dtype=np.int64)
    omega[kept["bin"].to_numpy(), kept["cell"].to_numpy()] = kept["category"].to_numpy()

    report = BinningReport(total, len(kept), collisions, out_of_box, outside_window, n_bins, start)
    logger.info("Binned %d events: kept %d, collisions %d, out of box %d, outside window %d",
                total, report.kept, collisions, out_of_box, outside_window)
    if not report.conserved():
        raise IngestError(f"Event accounting does not add up: {report}")
    return EventPanel(grid.spec(depth, link), omega), report


def panel_to_events(panel: EventPanel, grid: GridSpec, start: float = 0.0) -> pd.DataFrame:
    """
    Event table reproducing a panel: one event per nonzero entry, at the
    bin start and the cell centre.
    """
    names = {code: name for name, code in grid.categories}
    t_idx, cells = np.nonzero(panel.omega)
    rows, cols = np.divmod(cells, grid.cols)
    lat = grid.lat_min + (rows + 0.5) * (grid.lat_max - grid.lat_min) / grid.rows
    lon = grid.lon_min + (cols + 0.5) * (grid.lon_max - grid.lon_min) / grid.cols
    return pd.DataFrame({
        "timestamp": start + t_idx * grid.bin_seconds,
        "lat": lat,
        "lon": lon,
        "category": [names[int(c)] for c in panel.omega[t_idx, cells]],
    }, columns=list(COLUMNS))
