"""
Panel and parameter files.

Binary panels: magic "BPNL", version u16, K, M, d, N as little-endian u32,
then the (N + d) x K states row-major as u8. CSV panels: a
"# K=.. M=.. d=.. N=.." line followed by one comma-separated row per time step.
Parameters: JSON with the model dimensions and the flat value vector.
"""

import json
import logging
import re
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from errors import IngestError, SpecMismatchError
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector

logger = logging.getLogger(__name__)

MAGIC = b"BPNL"
VERSION = 1
HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u2"),
    ("K", "<u4"), ("M", "<u4"), ("d", "<u4"), ("N", "<u4"),
])
CSV_HEADER = re.compile(r"#\s*K=(\d+)\s+M=(\d+)\s+d=(\d+)\s+N=(\d+)")

PathLike = Union[str, Path]


def _dims(spec: ModelSpec) -> dict:
    return {"K": spec.K, "M": spec.M, "d": spec.d}


def _check_spec(found: ModelSpec, expected: Optional[ModelSpec]):
    if expected is not None and _dims(found) != _dims(expected):
        raise SpecMismatchError(expected, found)


def save_panel(panel: EventPanel, path: PathLike, fmt: Optional[str] = None) -> Path:
    """Write a panel as binary (default, or any suffix but .csv) or CSV."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "binary")
    spec = panel.spec
    if fmt == "binary":
        if spec.M > 255:
            raise ValueError(f"Binary panels store states as u8; M={spec.M} does not fit")
        header = np.array([(MAGIC, VERSION, spec.K, spec.M, spec.d, panel.N)], dtype=HEADER)
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(panel.omega, dtype=np.uint8).tobytes())
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# K={spec.K} M={spec.M} d={spec.d} N={panel.N}\n")
            pd.DataFrame(panel.omega.astype(np.int64)).to_csv(f, header=False, index=False, lineterminator="\n")
    else:
        raise ValueError(f"Unknown panel format {fmt!r}, expected 'binary' or 'csv'")
    logger.debug("Saved %s panel (%s, N=%d) to %s", fmt, spec, panel.N, path)
    return path


def _load_binary(raw: bytes, path: Path, link: LinkFunction) -> EventPanel:
    if len(raw) < HEADER.itemsize:
        raise IngestError(f"{path}: truncated panel header")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if header["version"] != VERSION:
        raise IngestError(f"{path}: unsupported panel version {header['version']}")
    K, M, d, N = (int(header[key]) for key in ("K", "M", "d", "N"))
    body = np.frombuffer(raw[HEADER.itemsize:], dtype=np.uint8)
    if body.size != (N + d) * K:
        raise IngestError(f"{path}: expected {(N + d) * K} state bytes, found {body.size}")
    return EventPanel(ModelSpec(K, M, d, link), body.reshape(N + d, K))


def _load_csv(path: Path, link: LinkFunction) -> EventPanel:
    with open(path, "r", encoding="utf-8") as f:
        match = CSV_HEADER.match(f.readline().strip())
    if match is None:
        raise IngestError(f"{path}: first line must be '# K=.. M=.. d=.. N=..'")
    K, M, d, N = (int(g) for g in match.groups())
    if N + d == 0:
        raise IngestError(f"{path}: panel has no rows")
    omega = pd.read_csv(path, skiprows=1, header=None, dtype=np.int64).to_numpy()
    if omega.shape != (N + d, K):
        raise IngestError(f"{path}: header promises {(N + d, K)} states, found {omega.shape}")
    return EventPanel(ModelSpec(K, M, d, link), omega)


def load_panel(path: PathLike, expected: Optional[ModelSpec] = None,
               link: LinkFunction = LinkFunction.IDENTITY) -> EventPanel:
    """
    Read a panel written by save_panel; the format is detected from the magic bytes

    Raises:
        SpecMismatchError: when `expected` is given and K, M or d differ
    """
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] == MAGIC:
        panel = _load_binary(raw, path, link)
    else:
        panel = _load_csv(path, link)
    _check_spec(panel.spec, expected)
    return panel


def save_params(beta: ParamVector, path: PathLike) -> Path:
    path = Path(path)
    payload = {"spec": beta.spec.to_dict(), "values": beta.values.tolist()}
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_params(path: PathLike, expected: Optional[ModelSpec] = None) -> ParamVector:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        spec = ModelSpec.from_dict(payload["spec"])
        values = np.asarray(payload["values"], dtype=float)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise IngestError(f"{path}: not a parameter file ({e})") from e
    if expected is not None and spec != expected:
        raise SpecMismatchError(expected, spec)
    return ParamVector(spec, values)
