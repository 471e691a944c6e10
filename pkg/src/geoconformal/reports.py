"""Rendering and atomic writing of run outputs.

Every writer renders its whole payload in memory first; files are then
written to a temporary sibling and moved into place with ``os.replace``,
so a failed run never leaves a half-written file behind. Floats in CSV
files use :func:`~geoconformal.geo.fmt_float`, so identical inputs give
byte-identical files.

Bundle layout for one run directory::

    intervals.csv        x, y, y_true, y_pred, q_hat, lower, upper, length
    coverage.json        CoverageReport keys
    uncertainty.geojson  Point features with properties uncertainty, local_i
    summary.json         config, metrics, timing (seconds, 4 decimals), created
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from .errors import GeoConformalError
from .geo import fmt_float

INTERVAL_COLUMNS = ("x", "y", "y_true", "y_pred", "q_hat", "lower", "upper", "length")


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_files(root, files: dict) -> list[str]:
    """Write ``{relative path: text}`` under ``root``; returns the written paths."""
    written = []
    for rel, text in files.items():
        path = os.path.join(root, rel)
        atomic_write(path, text)
        written.append(path)
    return written


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def table_csv(columns: dict) -> str:
    """CSV from ``{name: 1-d array}``; all columns must have equal length."""
    names = list(columns)
    cols = [np.asarray(columns[c], dtype=float).reshape(-1) for c in names]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise GeoConformalError("table columns differ in length")
    return csv_text(names, zip(*cols) if cols else [])


def intervals_csv(coords, y_true, y_pred, q_hat) -> str:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    y_pred = np.asarray(y_pred, dtype=float)
    q_hat = np.asarray(q_hat, dtype=float)
    lower, upper = y_pred - q_hat, y_pred + q_hat
    return table_csv({"x": coords[:, 0], "y": coords[:, 1], "y_true": y_true,
                      "y_pred": y_pred, "q_hat": q_hat, "lower": lower, "upper": upper,
                      "length": upper - lower})


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def geojson_text(coords, properties: dict) -> str:
    """FeatureCollection of Points; ``properties`` maps names to per-point arrays."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    props = {k: (None if v is None else np.asarray(v, dtype=float).reshape(-1))
             for k, v in properties.items()}
    feats = []
    for i, (x, y) in enumerate(coords):
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [float(x), float(y)]},
                      "properties": {k: (None if v is None else v[i]) for k, v in props.items()}})
    return json_text({"type": "FeatureCollection", "features": feats})


def round_timing(timing: dict) -> dict:
    return {k: round(float(v), 4) for k, v in timing.items()}


def summary_text(config: dict, metrics: dict, timing: dict | None = None) -> str:
    """Summary JSON; the creation timestamp lives only here."""
    return json_text({"config": config, "metrics": metrics,
                      "timing": round_timing(timing or {}),
                      "created": datetime.now(timezone.utc).isoformat(timespec="seconds")})
