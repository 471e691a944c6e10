"""Evaluation statistics: coverage, bootstrap baseline, Moran's I, correlations."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .conformal import CoverageLevel, GeoInterval
from .errors import GeoConformalError, GeoConformalWarning
from .geo import CRS, SpatialDataset, knn_indices, pairwise_distances
from .predictors import make_predictor


# --------------------------------------------------------------------------
# coverage and errors

@dataclass(frozen=True)
class CoverageReport:
    n_test: int
    n_covered: int
    coverage: float
    mean_length: float
    median_length: float
    level: float | None = None

    def as_dict(self) -> dict:
        return {"n_test": self.n_test, "n_covered": self.n_covered,
                "coverage": self.coverage, "mean_length": self.mean_length,
                "median_length": self.median_length,
                "target_coverage": None if self.level is None else 1.0 - self.level,
                "epsilon": self.level}


def coverage_from_bounds(lower, upper, truth, epsilon=None) -> CoverageReport:
    lower, upper, truth = (np.asarray(a, dtype=float).reshape(-1) for a in (lower, upper, truth))
    if not len(lower) == len(upper) == len(truth):
        raise GeoConformalError(
            f"length mismatch: {len(lower)} intervals vs {len(truth)} targets")
    if len(truth) == 0:
        raise GeoConformalError("no test points")
    covered = int(np.count_nonzero((lower <= truth) & (truth <= upper)))
    lengths = upper - lower
    return CoverageReport(len(truth), covered, covered / len(truth),
                          float(np.mean(lengths)), float(np.median(lengths)), epsilon)


def coverage_ratio(intervals: Sequence[GeoInterval], truth) -> CoverageReport:
    """Fraction of true targets inside their closed interval."""
    intervals = list(intervals)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if len(intervals) != len(truth):
        raise GeoConformalError(
            f"length mismatch: {len(intervals)} intervals vs {len(truth)} targets")
    eps = intervals[0].level.epsilon if intervals else None
    return coverage_from_bounds([i.lower for i in intervals], [i.upper for i in intervals],
                                truth, eps)


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if len(pred) != len(truth):
        raise GeoConformalError(f"length mismatch: {len(pred)} vs {len(truth)}")
    if len(pred) == 0:
        raise GeoConformalError("rmse of an empty vector")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def pearson_corr(a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if len(a) != len(b):
        raise GeoConformalError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise GeoConformalError("correlation needs at least 2 values")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise GeoConformalError("correlation of a constant vector")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


# --------------------------------------------------------------------------
# bootstrap baseline

@dataclass(eq=False)
class BootstrapReport:
    B: int
    lower: np.ndarray
    upper: np.ndarray
    predictions: np.ndarray
    coverage: float | None
    wall_time: float
    level: float = 0.1

    def as_dict(self) -> dict:
        return {"B": self.B, "coverage": self.coverage, "wall_time": round(self.wall_time, 4),
                "epsilon": self.level, "mean_length": float(np.mean(self.upper - self.lower))
                if len(self.lower) else None}


def bootstrap_intervals(ds: SpatialDataset, test: SpatialDataset, B: int = 2000,
                        predictor="gbt", level=0.1, seed: int = 0, threads: int = 1,
                        predictor_params: dict | None = None) -> BootstrapReport:
    """Percentile intervals from ``B`` models refit on resampled data.

    Replicate ``b`` draws ``len(ds)`` rows with replacement using seed
    ``seed + b``, so serial and threaded runs agree exactly. For
    miscoverage ``eps`` the interval is the ``[100 eps/2, 100 (1 - eps/2)]``
    percentile range (5th/95th at ``eps = 0.1``) of the replicate
    predictions, using Hazen plotting positions ``p * B + 1/2`` with linear
    interpolation between order statistics.
    """
    if B < 2:
        raise GeoConformalError("bootstrap needs B >= 2")
    eps = CoverageLevel.of(level).epsilon
    n = len(ds)
    if n == 0:
        raise GeoConformalError("empty dataset")
    params = predictor_params or {}
    t0 = time.perf_counter()

    def replicate(b):
        idx = np.random.default_rng(seed + b).integers(0, n, size=n)
        try:
            model = make_predictor(predictor, **params).fit(ds.subset(idx))
            return model.predict(test)
        except GeoConformalError as exc:
            raise GeoConformalError(f"bootstrap replicate {b} failed: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(replicate, range(B)))
    else:
        preds = [replicate(b) for b in range(B)]
    preds = np.array(preds).reshape(B, len(test))
    if len(test):
        lo, hi = np.percentile(preds, [100 * eps / 2, 100 * (1 - eps / 2)], axis=0,
                               method="hazen")
    else:
        lo = hi = np.zeros(0)
    wall = time.perf_counter() - t0
    cov = None
    if len(test) and test.has_target:
        cov = coverage_from_bounds(lo, hi, test.target, eps).coverage
    return BootstrapReport(B, lo, hi, preds, cov, wall, eps)


def bootstrap_error_percentiles(report: BootstrapReport, truth,
                                percentiles=(30, 50, 70, 90)) -> dict[int, np.ndarray]:
    """Per-point percentiles of the absolute replicate errors ``|f_b(x) - y|``."""
    err = np.abs(report.predictions - np.asarray(truth, dtype=float)[None, :])
    return {int(p): np.percentile(err, p, axis=0, method="hazen") for p in percentiles}


# --------------------------------------------------------------------------
# spatial weights and Moran's I

@dataclass(eq=False)
class SpatialWeightsMatrix:
    """Row-standardized sparse weights; isolated rows are empty and listed."""

    matrix: sparse.csr_matrix
    scheme: str
    isolated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        row = self.matrix.getrow(i)
        return list(zip(row.indices.tolist(), row.data.tolist()))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _row_standardize(rows, cols, n, scheme):
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    counts = np.bincount(rows, minlength=n)
    data = 1.0 / counts[rows] if len(rows) else np.zeros(0)
    m = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return SpatialWeightsMatrix(m, scheme, np.flatnonzero(counts == 0))


def build_spatial_weights(ds, scheme: str = "knn", k: int = 8, radius: float | None = None,
                          crs: CRS | None = None) -> SpatialWeightsMatrix:
    """KNN or distance-band neighbour weights, row-standardized, no self-weight.

    ``ds`` may be a :class:`SpatialDataset` or an ``(n, 2)`` coordinate array.
    """
    if isinstance(ds, SpatialDataset):
        coords, crs = ds.coords, ds.crs
    else:
        coords, crs = np.asarray(ds, dtype=float).reshape(-1, 2), CRS.parse(crs or CRS.PLANAR)
    n = len(coords)
    if n < 2:
        raise GeoConformalError("spatial weights need at least 2 points")
    scheme = scheme.lower()
    if scheme == "knn":
        if not 1 <= k < n:
            raise GeoConformalError(f"k={k} must satisfy 1 <= k < n={n}")
        idx, _ = knn_indices(coords, coords, k, crs, exclude_self=True)
        return _row_standardize(np.repeat(np.arange(n), k), idx.ravel(), n, f"knn(k={k})")
    if scheme in ("band", "distanceband", "distance_band"):
        if radius is None or not radius > 0:
            raise GeoConformalError("distance band needs a positive radius")
        d = pairwise_distances(coords, coords, crs)
        np.fill_diagonal(d, np.inf)
        rows, cols = np.nonzero(d <= radius)
        w = _row_standardize(rows, cols, n, f"band(r={radius})")
        if len(w.isolated):
            warnings.warn(f"{len(w.isolated)} point(s) have no neighbours within {radius}",
                          GeoConformalWarning, stacklevel=2)
        return w
    raise GeoConformalError(f"unknown weights scheme {scheme!r}")


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected_I: float
    variance: float
    z_score: float
    n: int

    def as_dict(self):
        return {"I": self.I, "expected_I": self.expected_I, "variance": self.variance,
                "z_score": self.z_score, "n": self.n}


def _centered(values, W):
    z = np.asarray(values, dtype=float).reshape(-1)
    if len(z) != W.n:
        raise GeoConformalError(f"{len(z)} values for a {W.n}-point weights matrix")
    zc = z - z.mean()
    ss = float(np.sum(zc * zc))
    # spread at the level of rounding noise counts as constant
    if ss <= len(z) * (1e-14 * float(np.max(np.abs(z), initial=0.0))) ** 2:
        raise GeoConformalError("zero variance")
    return zc, ss


def morans_i(values, W: SpatialWeightsMatrix) -> MoranResult:
    """Global Moran's I with its moments under the normality assumption."""
    zc, ss = _centered(values, W)
    n = W.n
    M = W.matrix
    s0 = float(M.sum())
    if s0 == 0:
        raise GeoConformalError("weights matrix has no links")
    I = (n / s0) * float(zc @ (M @ zc)) / ss
    e = -1.0 / (n - 1)
    sym = M + M.T
    s1 = 0.5 * float(sym.multiply(sym).sum())
    s2 = float(np.sum((np.asarray(M.sum(axis=1)).ravel() + np.asarray(M.sum(axis=0)).ravel()) ** 2))
    var = (n * n * s1 - n * s2 + 3 * s0 * s0) / ((n * n - 1) * s0 * s0) - e * e
    z = (I - e) / np.sqrt(var) if var > 0 else float("nan")
    return MoranResult(float(I), e, float(var), float(z), n)


def local_morans_i(values, W: SpatialWeightsMatrix) -> np.ndarray:
    """Local Moran's I ``(z_i / m2) * sum_j w_ij z_j`` with ``m2 = sum(z**2) / n``."""
    zc, ss = _centered(values, W)
    m2 = ss / W.n
    return zc / m2 * (W.matrix @ zc)


# --------------------------------------------------------------------------
# uncertainty vs. spatial dependence

@dataclass
class DependenceRun:
    uncertainty: np.ndarray
    values: np.ndarray
    W: SpatialWeightsMatrix
    label: str = ""


@dataclass
class DependenceReport:
    """Per run: global Moran's I of the values and corr(local I, uncertainty)."""

    labels: list
    global_i: np.ndarray
    inner_corr: np.ndarray
    outer_corr: float | None
    skipped: list

    def as_dict(self):
        return {"runs": [{"label": l, "global_I": float(g), "inner_corr": float(c)}
                         for l, g, c in zip(self.labels, self.global_i, self.inner_corr)],
                "outer_corr": self.outer_corr, "skipped": self.skipped}


def dependence_analysis(runs: Sequence) -> DependenceReport:
    """Two-level analysis: inner correlation per run, outer correlation across runs.

    Each run supplies per-point uncertainty, the per-point values and a
    weights matrix (a :class:`DependenceRun` or a dict with those keys).
    Runs with constant values or uncertainty are skipped with a warning.
    """
    labels, gis, inner, skipped = [], [], [], []
    for j, run in enumerate(runs):
        if isinstance(run, dict):
            run = DependenceRun(**run)
        label = run.label or str(j)
        try:
            gi = morans_i(run.values, run.W).I
            r = pearson_corr(local_morans_i(run.values, run.W), run.uncertainty)
        except GeoConformalError as exc:
            warnings.warn(f"run {label} skipped: {exc}", GeoConformalWarning, stacklevel=2)
            skipped.append(label)
            continue
        labels.append(label)
        gis.append(gi)
        inner.append(r)
    outer = None
    if len(gis) >= 2:
        try:
            outer = pearson_corr(gis, inner)
        except GeoConformalError:
            outer = None
    return DependenceReport(labels, np.array(gis), np.array(inner), outer, skipped)


@dataclass
class ChangeResult:
    correlation: float | None
    delta: np.ndarray
    degenerate: bool

    def as_dict(self):
        return {"correlation": "degenerate" if self.degenerate else self.correlation,
                "mean_delta": float(np.mean(self.delta)) if len(self.delta) else None}


def uncertainty_change_analysis(base_uncertainty, variant_uncertainty, values,
                                W: SpatialWeightsMatrix) -> ChangeResult:
    """Correlation between local Moran's I of ``values`` and ``variant - base``."""
    base = np.asarray(base_uncertainty, dtype=float).reshape(-1)
    var = np.asarray(variant_uncertainty, dtype=float).reshape(-1)
    if len(base) != len(var) or len(base) != W.n:
        raise GeoConformalError("runs must share the same test points")
    delta = var - base
    if np.all(delta == delta[0]):
        return ChangeResult(None, delta, True)
    try:
        r = pearson_corr(local_morans_i(values, W), delta)
    except GeoConformalError:
        return ChangeResult(None, delta, True)
    return ChangeResult(r, delta, False)
