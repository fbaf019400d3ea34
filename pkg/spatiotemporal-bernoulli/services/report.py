"""
Report emission for experiment bundles: CSV tables, JSON bundle, SVG figures
and an optional PDF summary. File names depend only on the experiment name.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Union

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update({
    "svg.hashsalt": "spatiotemporal-bernoulli",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "axes.unicode_minus": False,
})
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from services.experiment import ExperimentBundle, ReplicationRecord  # noqa: E402
from services.pdf_generator import generate_experiment_pdf  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json", "pdf")


def _write_csv(frame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e
    return path


def _save_figure(fig, path: Path) -> Path:
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def _first_with(records: List[ReplicationRecord], attribute: str):
    for record in records:
        if getattr(record, attribute):
            return record
    return None


def plot_parameters(record: ReplicationRecord, path: Path) -> Path:
    """True vs estimated coefficients of one replication, in flat layout order."""
    fig, ax = plt.subplots(figsize=(10, 3.6), constrained_layout=True)
    index = np.arange(len(record.truth))
    ax.bar(index, record.truth, color="#1e3a5f", alpha=0.45, label="true")
    for name in sorted(record.estimates):
        ax.plot(index, record.estimates[name], marker=".", linewidth=0.8, label=name)
    ax.set_xlabel("Parameter index")
    ax.set_ylabel("Value")
    ax.set_title(f"Replication {record.replication}: true vs estimated parameters")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    return _save_figure(fig, path)


def plot_intervals(record: ReplicationRecord, path: Path) -> Path:
    """Confidence-interval whiskers per coordinate with the true values marked."""
    fig, ax = plt.subplots(figsize=(10, 3.6), constrained_layout=True)
    for i, ci in enumerate(record.intervals):
        if not ci["feasible"] or ci["lower"] is None or ci["upper"] is None:
            continue
        ax.plot([i, i], [ci["lower"], ci["upper"]], color="#2d5a7b", linewidth=1.0)
    if record.truth is not None:
        ax.plot(np.arange(len(record.truth)), record.truth, "o", color="#ef4444", markersize=2.5, label="true")
        ax.legend(loc="best", fontsize=8)
    level = f" (coverage {record.coverage:.3f})" if record.coverage is not None else ""
    ax.set_title(f"Coordinate confidence intervals{level}")
    ax.set_xlabel("Parameter index")
    ax.grid(True, alpha=0.3)
    return _save_figure(fig, path)


def plot_support(record: ReplicationRecord, path: Path) -> Path:
    """Histogram of max_s |beta^s_kl| with the largest-gap threshold per estimator."""
    names = sorted(record.support)
    fig, axes = plt.subplots(1, len(names), figsize=(4.5 * len(names), 3.4),
                             constrained_layout=True, squeeze=False)
    for ax, name in zip(axes[0], names):
        support = record.support[name]
        ax.hist(support["influence"], bins=30, color="#34d399", edgecolor="#1e3a5f")
        ax.axvline(support["threshold"], color="#ef4444", linestyle="--", linewidth=1.0)
        ax.set_title(f"{name}: {'exact' if support['exact'] else 'inexact'} recovery")
        ax.set_xlabel("max over lags of |interaction|")
        ax.grid(True, alpha=0.3)
    axes[0][0].set_ylabel("Location pairs")
    return _save_figure(fig, path)


def emit_report(bundle: ExperimentBundle, output_dir: Union[str, Path],
                formats: Union[str, Iterable[str]] = ("csv", "json"),
                figures: bool = True) -> List[Path]:
    """
    Write report files for a bundle

    Args:
        bundle: experiment bundle (may hold no records)
        output_dir: target directory, created when missing
        formats: "csv", "json", "pdf" or a collection of them
        figures: also write SVG figures for the available content

    Returns:
        Paths written, in a fixed order
    """
    formats = (formats,) if isinstance(formats, str) else tuple(formats)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ValueError(f"Unknown report formats {unknown}, expected {FORMATS}")
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Could not create output directory {out}: {e}") from e
    name = bundle.name
    written: List[Path] = []

    if "csv" in formats:
        written.append(_write_csv(bundle.metrics_frame(), out / f"{name}_metrics.csv"))
        written.append(_write_csv(bundle.summary(), out / f"{name}_summary.csv"))
        written.append(_write_csv(bundle.runs_frame(), out / f"{name}_runs.csv"))

    if "json" in formats:
        path = out / f"{name}_bundle.json"
        try:
            path.write_text(json.dumps(bundle.to_dict(), indent=2, allow_nan=False) + "\n", encoding="utf-8")
        except OSError as e:
            raise OSError(f"Could not write {path}: {e}") from e
        written.append(path)

    if "pdf" in formats:
        path = out / f"{name}_summary.pdf"
        try:
            path.write_bytes(generate_experiment_pdf(bundle))
        except OSError as e:
            raise OSError(f"Could not write {path}: {e}") from e
        written.append(path)

    if figures:
        record = _first_with(bundle.records, "estimates")
        if record is not None and record.truth is not None:
            written.append(plot_parameters(record, out / f"{name}_params.svg"))
        record = _first_with(bundle.records, "intervals")
        if record is not None:
            written.append(plot_intervals(record, out / f"{name}_confint.svg"))
        record = _first_with(bundle.records, "support")
        if record is not None:
            written.append(plot_support(record, out / f"{name}_support.svg"))

    logger.info("Wrote %d report file(s) to %s", len(written), out)
    return written
