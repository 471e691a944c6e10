"""Spatial data model, distance metrics, CSV ingestion and seeded splitting.

A :class:`SpatialDataset` stores its records column-wise as read-only numpy
arrays (``coords``, ``features``, ``target``); :class:`SpatialRecord` and
:class:`Location` are the row-level views used at API boundaries.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CRSMismatchError,
    EmptyDatasetError,
    GeoConformalError,
    GeoConformalWarning,
    SchemaError,
)

EARTH_RADIUS_M = 6_371_000.0


class CRS(enum.Enum):
    PLANAR = "planar"
    LATLON = "latlon"

    @classmethod
    def parse(cls, value: "str | CRS") -> "CRS":
        if isinstance(value, CRS):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise GeoConformalError(
                f"unknown CRS {value!r}; expected 'planar' or 'latlon'") from None


def _check_coords(xy: np.ndarray, crs: CRS) -> None:
    if not np.all(np.isfinite(xy)):
        raise GeoConformalError("coordinates must be finite")
    if crs is CRS.LATLON and xy.size:
        if np.any(np.abs(xy[..., 0]) > 180) or np.any(np.abs(xy[..., 1]) > 90):
            raise GeoConformalError(
                "latlon coordinates out of range (x=lon in [-180,180], y=lat in [-90,90])")


@dataclass(frozen=True)
class Location:
    x: float
    y: float
    crs: CRS = CRS.PLANAR

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "crs", CRS.parse(self.crs))
        _check_coords(np.array([self.x, self.y]), self.crs)


@dataclass(frozen=True)
class SpatialRecord:
    loc: Location
    features: tuple = ()
    target: float = float("nan")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """Georeferenced records held as parallel arrays.

    Parameters
    ----------
    coords : array of shape (n, 2)
        ``x``/``y`` per record (lon/lat in degrees when ``crs`` is latlon).
    features : array of shape (n, p)
        Feature matrix; ``p`` may be zero.
    target : array of shape (n,)
        Observed values. ``NaN`` marks an unknown target (query-only data);
        every model refuses to train on such records.
    feature_names : tuple of str
    crs : CRS
    """

    coords: np.ndarray
    features: np.ndarray
    target: np.ndarray
    feature_names: tuple = ()
    crs: CRS = CRS.PLANAR

    def __post_init__(self):
        coords = _readonly(np.asarray(self.coords, dtype=float).reshape(-1, 2))
        n = coords.shape[0]
        feats = np.asarray(self.features, dtype=float)
        if feats.size == 0:
            feats = np.zeros((n, len(self.feature_names) if n == 0 else 0))
        if not (feats.ndim == 2 and feats.shape[0] == n):
            feats = feats.reshape(n, -1)
        feats = _readonly(feats)
        target = _readonly(np.asarray(self.target, dtype=float).reshape(-1))
        names = tuple(str(s) for s in self.feature_names)
        crs = CRS.parse(self.crs)
        if target.shape[0] != n:
            raise SchemaError(f"{n} coordinates but {target.shape[0]} targets")
        if feats.shape[1] != len(names):
            raise SchemaError(
                f"feature matrix has {feats.shape[1]} columns but "
                f"{len(names)} feature names")
        _check_coords(coords, crs)
        if not np.all(np.isfinite(feats)):
            raise GeoConformalError("feature values must be finite")
        if np.any(np.isinf(target)):
            raise GeoConformalError("target values must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "crs", crs)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialDataset):
            return NotImplemented
        return (self.crs is other.crs
                and self.feature_names == other.feature_names
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.target, other.target, equal_nan=True))

    __hash__ = None

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def has_target(self) -> bool:
        return bool(np.all(np.isfinite(self.target)))

    def location(self, i: int) -> Location:
        return Location(self.coords[i, 0], self.coords[i, 1], self.crs)

    def locations(self) -> list[Location]:
        return [self.location(i) for i in range(len(self))]

    @property
    def records(self) -> list[SpatialRecord]:
        return [SpatialRecord(self.location(i), tuple(self.features[i]),
                              float(self.target[i]))
                for i in range(len(self))]

    @classmethod
    def from_records(cls, records: Sequence[SpatialRecord],
                     feature_names: Sequence[str] = (),
                     crs: "CRS | str | None" = None) -> "SpatialDataset":
        records = list(records)
        if crs is None:
            crs = records[0].loc.crs if records else CRS.PLANAR
        crs = CRS.parse(crs)
        for r in records:
            if r.loc.crs is not crs:
                raise CRSMismatchError(crs, r.loc.crs)
        p = len(feature_names)
        for r in records:
            if len(r.features) != p:
                raise SchemaError(
                    f"record has {len(r.features)} features, expected {p}")
        coords = np.array([[r.loc.x, r.loc.y] for r in records]).reshape(-1, 2)
        feats = np.array([list(r.features) for r in records], dtype=float).reshape(len(records), p)
        target = np.array([r.target for r in records], dtype=float)
        return cls(coords, feats, target, tuple(feature_names), crs)

    @classmethod
    def from_locations(cls, locs: Sequence[Location]) -> "SpatialDataset":
        """Query-only dataset (no features, unknown targets)."""
        if not locs:
            return cls(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros(0))
        crs = locs[0].crs
        for loc in locs:
            if loc.crs is not crs:
                raise CRSMismatchError(crs, loc.crs)
        coords = np.array([[l.x, l.y] for l in locs])
        return cls(coords, np.zeros((len(locs), 0)), np.full(len(locs), np.nan), (), crs)

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx, dtype=int)
        return SpatialDataset(self.coords[idx], self.features[idx],
                              self.target[idx], self.feature_names, self.crs)

    def with_target(self, target) -> "SpatialDataset":
        return SpatialDataset(self.coords, self.features, target,
                              self.feature_names, self.crs)

    def with_coords_as_features(self, names=("coord_x", "coord_y")) -> "SpatialDataset":
        """Append the coordinates to the feature matrix."""
        feats = np.hstack([self.features, self.coords])
        return SpatialDataset(self.coords, feats, self.target,
                              self.feature_names + tuple(names), self.crs)


# --------------------------------------------------------------------------
# distances

def pairwise_distances(a: np.ndarray, b: np.ndarray, crs: CRS = CRS.PLANAR) -> np.ndarray:
    """Distance matrix between two coordinate arrays of shape (n, 2) and (m, 2).

    Planar coordinates use Euclidean distance in native units; latlon
    coordinates (x=lon, y=lat, degrees) use the haversine great-circle
    distance in meters.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if CRS.parse(crs) is CRS.PLANAR:
        dx = a[:, None, 0] - b[None, :, 0]
        dy = a[:, None, 1] - b[None, :, 1]
        return np.hypot(dx, dy)
    lon1, lat1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lon2, lat2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance(a: Location, b: Location) -> float:
    if a.crs is not b.crs:
        raise CRSMismatchError(a.crs, b.crs)
    if a.x == b.x and a.y == b.y:
        return 0.0
    return float(pairwise_distances([[a.x, a.y]], [[b.x, b.y]], a.crs)[0, 0])


def bearings(a: np.ndarray, b: np.ndarray, crs: CRS = CRS.PLANAR) -> np.ndarray:
    """Angle (radians, counter-clockwise from east) from ``a`` to ``b``.

    ``a`` and ``b`` broadcast against each other over all but their last
    axis (which holds x, y). For latlon data the initial great-circle
    bearing is converted to the same east-based convention.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if CRS.parse(crs) is CRS.PLANAR:
        return np.arctan2(b[..., 1] - a[..., 1], b[..., 0] - a[..., 0])
    lon1, lat1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lon2, lat2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    dlon = lon2 - lon1
    north = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(dlon)
    east = np.sin(dlon) * np.cos(lat2)
    return np.arctan2(north, east)


def pairwise_bearings(a: np.ndarray, b: np.ndarray, crs: CRS = CRS.PLANAR) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    return bearings(a[:, None, :], b[None, :, :], crs)


def max_pairwise_distance(coords: np.ndarray, crs: CRS = CRS.PLANAR) -> float:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(coords) < 2:
        return 0.0
    return float(pairwise_distances(coords, coords, crs).max())


# --------------------------------------------------------------------------
# neighbors

def knn_indices(ref: np.ndarray, queries: np.ndarray, k: int, crs: CRS = CRS.PLANAR,
                exclude_self: bool = False, chunk: int = 1024):
    """k nearest reference points for every query.

    Returns ``(idx, dist)`` arrays of shape (q, k), ordered by distance with
    ties broken by the lower reference index. With ``exclude_self`` the
    query ``i`` is assumed to be reference point ``i`` and is skipped.
    """
    ref = np.asarray(ref, dtype=float).reshape(-1, 2)
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    n = len(ref)
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise GeoConformalError(f"k={k} out of range [1, {limit}]")
    out_i = np.empty((len(queries), k), dtype=int)
    out_d = np.empty((len(queries), k))
    for s in range(0, len(queries), chunk):
        d = pairwise_distances(queries[s:s + chunk], ref, crs)
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, rows + s] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        out_i[s:s + chunk] = order
        out_d[s:s + chunk] = np.take_along_axis(d, order, axis=1)
    return out_i, out_d


def knn_neighbors(ds: SpatialDataset, query: Location, k: int) -> list[tuple[int, float]]:
    """The ``k`` records nearest to ``query`` as ``(index, distance)`` pairs."""
    if query.crs is not ds.crs:
        raise CRSMismatchError(ds.crs, query.crs)
    if not 1 <= k <= len(ds):
        raise GeoConformalError(f"k={k} out of range [1, {len(ds)}]")
    idx, dist = knn_indices(ds.coords, [[query.x, query.y]], k, ds.crs)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


# --------------------------------------------------------------------------
# splitting

@dataclass(frozen=True, eq=False)
class SplitResult:
    train: SpatialDataset
    calib: SpatialDataset
    test: SpatialDataset
    seed: int
    fractions: tuple
    train_idx: np.ndarray = field(repr=False, default=None)
    calib_idx: np.ndarray = field(repr=False, default=None)
    test_idx: np.ndarray = field(repr=False, default=None)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    _, f_calib, f_test = _check_fractions(fractions)
    # floor with slack for representation error (0.1 * 90 = 9.000000000000002)
    n_calib = int(math.floor(f_calib * n + 1e-9))
    n_test = int(math.floor(f_test * n + 1e-9))
    return n - n_calib - n_test, n_calib, n_test


def _check_fractions(fractions):
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3:
        raise GeoConformalError("split needs exactly three fractions (train, calib, test)")
    if any(not math.isfinite(f) or f < 0 or f > 1 for f in fr):
        raise GeoConformalError(f"split fractions out of range: {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise GeoConformalError(f"split fractions must sum to 1, got {sum(fr)!r}")
    return fr


def split_dataset(ds: SpatialDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitResult:
    """Uniform random train/calibration/test partition.

    Sizes are ``floor(f * n)`` for calibration and test, the remainder goes
    to training. Each part keeps the records in input order.
    """
    if len(ds) == 0:
        raise EmptyDatasetError()
    fr = _check_fractions(fractions)
    n_train, n_calib, _ = split_sizes(len(ds), fr)
    perm = np.random.default_rng(seed).permutation(len(ds))
    parts = (np.sort(perm[:n_train]),
             np.sort(perm[n_train:n_train + n_calib]),
             np.sort(perm[n_train + n_calib:]))
    return SplitResult(ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2]),
                       int(seed), fr, *parts)


# --------------------------------------------------------------------------
# CSV

@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold the coordinates, target and features."""

    x: str = "x"
    y: str = "y"
    target: str = "target"
    features: tuple = ()
    crs: CRS = CRS.PLANAR

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "crs", CRS.parse(self.crs))


def _read_rows(path, columns: Iterable[str]):
    if not os.path.exists(path):
        raise GeoConformalError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError() from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        rows = [(line, row) for line, row in enumerate(reader, start=2) if any(c.strip() for c in row)]
    if not rows:
        raise EmptyDatasetError()
    return header, rows


def _parse_float(cell: str, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise GeoConformalError(
            f"unparseable value {cell!r} at line {line}, column {col!r}") from None
    if not math.isfinite(v):
        raise GeoConformalError(f"non-finite value {cell!r} at line {line}, column {col!r}")
    return v


def _merge_duplicates(coords, feats, target, source=""):
    keys = {}
    order = []
    for i, key in enumerate(map(tuple, coords)):
        if key in keys:
            keys[key].append(i)
        else:
            keys[key] = [i]
            order.append(key)
    if len(order) == len(coords):
        return coords, feats, target
    n_same = n_diff = 0
    keep, merged_t = [], []
    for key in order:
        idx = keys[key]
        keep.append(idx[0])
        t = target[idx]
        if len(idx) > 1:
            if np.all(t == t[0]):
                n_same += 1
            else:
                n_diff += 1
        merged_t.append(t.mean())
    where = f" in {source}" if source else ""
    if n_same:
        warnings.warn(f"{n_same} duplicate location(s) with equal targets{where} "
                      "were deduplicated", GeoConformalWarning, stacklevel=3)
    if n_diff:
        warnings.warn(f"{n_diff} duplicate location(s) with differing targets{where} "
                      "were merged by averaging the targets", GeoConformalWarning,
                      stacklevel=3)
    keep = np.array(keep)
    return coords[keep], feats[keep], np.array(merged_t)


def _rows_to_dataset(header, rows, schema: ColumnMapping, source=""):
    cols = [schema.x, schema.y, schema.target, *schema.features]
    pos = [header.index(c) for c in cols]
    data = np.empty((len(rows), len(cols)))
    for r, (line, row) in enumerate(rows):
        for j, (c, p) in enumerate(zip(cols, pos)):
            cell = row[p].strip() if p < len(row) else ""
            data[r, j] = _parse_float(cell, line, c)
    coords, target, feats = data[:, :2], data[:, 2], data[:, 3:]
    coords, feats, target = _merge_duplicates(coords, feats, target, source)
    return SpatialDataset(coords, feats, target, schema.features, schema.crs)


def parse_dataset(path, schema: ColumnMapping) -> SpatialDataset:
    """Load a CSV file into a :class:`SpatialDataset`.

    Rows sharing a location are merged (first row's features, mean target)
    with a :class:`GeoConformalWarning`, since coincident points make the
    kriging system singular.
    """
    header, rows = _read_rows(path, [schema.x, schema.y, schema.target, *schema.features])
    return _rows_to_dataset(header, rows, schema, source=str(path))


def parse_grouped(path, schema: ColumnMapping, group_col: str) -> dict[str, SpatialDataset]:
    """Load a CSV holding several datasets keyed by ``group_col`` (e.g. one per day).

    Groups are returned in order of first appearance.
    """
    header, rows = _read_rows(path, [schema.x, schema.y, schema.target, *schema.features, group_col])
    g = header.index(group_col)
    groups: dict[str, list] = {}
    for line, row in rows:
        groups.setdefault(row[g].strip(), []).append((line, row))
    return {key: _rows_to_dataset(header, grp, schema, source=f"{path} [{group_col}={key}]")
            for key, grp in groups.items()}


def fmt_float(v: float) -> str:
    """Shortest round-trip text for a float (``repr``), used by every writer."""
    return repr(float(v))


def write_dataset(ds: SpatialDataset, path, schema: ColumnMapping | None = None) -> None:
    if schema is None:
        schema = ColumnMapping(features=ds.feature_names, crs=ds.crs)
    if tuple(schema.features) != ds.feature_names:
        raise SchemaError("schema feature columns do not match the dataset")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.x, schema.y, schema.target, *schema.features])
        for i in range(len(ds)):
            w.writerow([fmt_float(ds.coords[i, 0]), fmt_float(ds.coords[i, 1]),
                        fmt_float(ds.target[i]), *map(fmt_float, ds.features[i])])
