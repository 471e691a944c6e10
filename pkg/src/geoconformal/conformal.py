"""Split conformal prediction with geographically weighted quantiles.

The interval at a test location is ``f(x) +/- q`` where ``q`` is the
``(1 - eps)`` quantile of the calibration residuals ``|f(x_i) - y_i|``
under weights that decay with distance from the test location. With a
uniform kernel this is ordinary split conformal prediction.
"""

from __future__ import annotations

import enum
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (CRSMismatchError, EmptyDatasetError, GeoConformalError, GeoConformalWarning,
                     StageError)
from .geo import (CRS, Location, SpatialDataset, SplitResult, pairwise_distances,
                  split_dataset)
from .predictors import PredictorModel, make_predictor

# Slack on the cumulative-weight threshold. Normalized cumulative sums
# carry ~1e-16 rounding, so k/m == 1 - eps must still select index k.
QUANTILE_TOL = 1e-12


class KernelFamily(enum.Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"
    BISQUARE = "bisquare"
    UNIFORM = "uniform"

    @classmethod
    def parse(cls, v) -> "KernelFamily":
        if isinstance(v, KernelFamily):
            return v
        try:
            return cls(str(v).strip().lower())
        except ValueError:
            raise GeoConformalError(
                f"unknown kernel {v!r}; choose gaussian, exponential, bisquare or uniform") from None


@dataclass(frozen=True)
class DecayKernel:
    family: KernelFamily = KernelFamily.GAUSSIAN
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        if not self.bandwidth > 0 or not np.isfinite(self.bandwidth):
            raise GeoConformalError(f"kernel bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        if np.any(d < 0):
            raise GeoConformalError("distances must be nonnegative")
        b = self.bandwidth
        fam = self.family
        if fam is KernelFamily.GAUSSIAN:
            return np.exp(-0.5 * (d / b) ** 2)
        if fam is KernelFamily.EXPONENTIAL:
            return np.exp(-d / b)
        if fam is KernelFamily.BISQUARE:
            return np.where(d < b, (1.0 - (d / b) ** 2) ** 2, 0.0)
        return np.ones_like(d)


def kernel_weight(kernel: DecayKernel, d):
    w = kernel(d)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class CoverageLevel:
    epsilon: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not 0 < self.epsilon < 1:
            raise GeoConformalError(f"miscoverage epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def coverage(self) -> float:
        return 1.0 - self.epsilon

    @classmethod
    def of(cls, v) -> "CoverageLevel":
        return v if isinstance(v, CoverageLevel) else cls(v)


@dataclass(frozen=True, eq=False)
class CalibrationProfile:
    """Calibration scores sorted ascending, with their locations.

    ``index[j]`` is the original calibration position of the ``j``-th
    smallest score; the sort is stable so ties keep calibration order.
    """

    scores: np.ndarray
    coords: np.ndarray
    index: np.ndarray
    crs: CRS = CRS.PLANAR

    @classmethod
    def from_scores(cls, scores, coords, crs=CRS.PLANAR) -> "CalibrationProfile":
        scores = np.asarray(scores, dtype=float).reshape(-1)
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if len(scores) == 0:
            raise EmptyDatasetError("empty calibration set")
        if len(coords) != len(scores):
            raise GeoConformalError("one calibration location per score required")
        if np.any(~np.isfinite(scores)) or np.any(scores < 0):
            raise GeoConformalError("nonconformity scores must be finite and nonnegative")
        order = np.argsort(scores, kind="stable")
        return cls(scores[order], coords[order], order, CRS.parse(crs))

    @property
    def m(self) -> int:
        return len(self.scores)

    def locations(self) -> list[Location]:
        return [Location(x, y, self.crs) for x, y in self.coords]


def nonconformity_scores(model: PredictorModel, calib: SpatialDataset) -> CalibrationProfile:
    """Absolute residuals ``|f(x_i) - y_i|`` on the calibration set."""
    if len(calib) == 0:
        raise EmptyDatasetError("empty calibration set")
    if not calib.has_target:
        raise GeoConformalError("calibration targets must be finite")
    pred = model.predict(calib)
    return CalibrationProfile.from_scores(np.abs(pred - calib.target), calib.coords, calib.crs)


# --------------------------------------------------------------------------
# quantiles

def weighted_quantile(sorted_scores: np.ndarray, weights: np.ndarray, level,
                      conservative: bool = False) -> np.ndarray:
    """First score whose normalized cumulative weight reaches ``1 - eps``.

    Parameters
    ----------
    sorted_scores : (m,) ascending scores
    weights : (t, m) nonnegative weights aligned with ``sorted_scores``
    level : CoverageLevel or epsilon
    conservative : bool
        Add a unit point mass at ``+inf`` for the test point before
        normalizing; rows that never reach the threshold return ``inf``.

    Rows whose weights sum to zero fall back to uniform weights with a
    :class:`GeoConformalWarning`.
    """
    level = CoverageLevel.of(level)
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    total = w.sum(axis=1)
    dead = total <= 0
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} test point(s) have zero total kernel weight; "
                      "falling back to uniform weights", GeoConformalWarning, stacklevel=3)
        w = w.copy()
        w[dead] = 1.0
        total = w.sum(axis=1)
    if conservative:
        total = total + 1.0
    cum = np.cumsum(w, axis=1) / total[:, None]
    hit = cum >= level.coverage - QUANTILE_TOL
    k = np.argmax(hit, axis=1)
    q = np.asarray(sorted_scores, dtype=float)[k]
    if conservative:
        q = np.where(hit.any(axis=1), q, np.inf)
    return q


def cp_quantile(profile: CalibrationProfile, level, conservative: bool = False) -> float:
    """Plain split-conformal quantile (every score weighted ``1/m``)."""
    w = np.ones((1, profile.m))
    return float(weighted_quantile(profile.scores, w, level, conservative)[0])


def geo_quantiles(profile: CalibrationProfile, test_coords, kernel: DecayKernel, level,
                  conservative: bool = False, threads: int = 1, chunk: int = 512) -> np.ndarray:
    """Geographically weighted quantile for many test locations at once.

    Chunks of test points are independent; with ``threads > 1`` they run
    on a thread pool and are reassembled in input order.
    """
    level = CoverageLevel.of(level)
    test_coords = np.asarray(test_coords, dtype=float).reshape(-1, 2)
    if len(test_coords) == 0:
        return np.zeros(0)

    def run(s):
        d = pairwise_distances(test_coords[s:s + chunk], profile.coords, profile.crs)
        return weighted_quantile(profile.scores, kernel(d), level, conservative)

    starts = range(0, len(test_coords), chunk)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts)


def geo_quantile(profile: CalibrationProfile, test_loc: Location, kernel: DecayKernel,
                 level, conservative: bool = False) -> float:
    """Geographically weighted ``(1 - eps)`` quantile of the calibration scores."""
    if test_loc.crs is not profile.crs:
        raise CRSMismatchError(profile.crs, test_loc.crs)
    return float(geo_quantiles(profile, [[test_loc.x, test_loc.y]], kernel, level, conservative)[0])


def median_bandwidth(coords, crs=CRS.PLANAR) -> float:
    """Median pairwise distance between calibration points (1.0 if undefined)."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(coords) < 2:
        return 1.0
    d = pairwise_distances(coords, coords, crs)[np.triu_indices(len(coords), k=1)]
    med = float(np.median(d))
    return med if med > 0 else 1.0


def resolve_kernel(kernel="gaussian", bandwidth="median",
                   profile: CalibrationProfile | None = None) -> DecayKernel:
    if isinstance(kernel, DecayKernel):
        return kernel
    if isinstance(bandwidth, str):
        if bandwidth.strip().lower() != "median":
            bandwidth = float(bandwidth)
        else:
            if profile is None:
                raise GeoConformalError("median bandwidth needs a calibration profile")
            bandwidth = median_bandwidth(profile.coords, profile.crs)
    return DecayKernel(kernel, bandwidth)


# --------------------------------------------------------------------------
# intervals and the pipeline

@dataclass(frozen=True)
class GeoInterval:
    center: float
    half_width: float
    level: CoverageLevel

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    @property
    def length(self) -> float:
        return 2.0 * self.half_width

    def __contains__(self, y) -> bool:
        return self.lower <= y <= self.upper


@dataclass(eq=False)
class GeoCPResult:
    """Everything one GeoCP run produces, aligned with ``split.test``."""

    predictions: np.ndarray
    q_hat: np.ndarray
    level: CoverageLevel
    kernel: DecayKernel
    profile: CalibrationProfile
    model: PredictorModel
    split: SplitResult | None = None
    test: SpatialDataset | None = None
    timing: dict = field(default_factory=dict)

    @property
    def intervals(self) -> list[GeoInterval]:
        return [GeoInterval(float(c), float(h), self.level)
                for c, h in zip(self.predictions, self.q_hat)]

    @property
    def lower(self) -> np.ndarray:
        return self.predictions - self.q_hat

    @property
    def upper(self) -> np.ndarray:
        return self.predictions + self.q_hat

    @property
    def uncertainty(self) -> np.ndarray:
        """Interval length ``2 q`` per test point."""
        return 2.0 * self.q_hat


def conformalize(model: PredictorModel, calib: SpatialDataset, test: SpatialDataset,
                 kernel="gaussian", bandwidth="median", level=0.1,
                 conservative: bool = False, threads: int = 1) -> GeoCPResult:
    """Stages 3 and 4 for an already fitted model."""
    level = CoverageLevel.of(level)
    t0 = time.perf_counter()
    try:
        profile = nonconformity_scores(model, calib)
    except GeoConformalError as exc:
        raise StageError("calibrate", exc) from exc
    t1 = time.perf_counter()
    try:
        kern = resolve_kernel(kernel, bandwidth, profile)
        if test.crs is not profile.crs and len(test):
            raise CRSMismatchError(profile.crs, test.crs)
        pred = model.predict(test)
        q = geo_quantiles(profile, test.coords, kern, level, conservative, threads)
    except GeoConformalError as exc:
        raise StageError("quantile", exc) from exc
    t2 = time.perf_counter()
    return GeoCPResult(pred, q, level, kern, profile, model, test=test,
                       timing={"calibrate": t1 - t0, "quantile": t2 - t1})


def geocp_run(ds: SpatialDataset, predictor="gbt", kernel="gaussian", bandwidth="median",
              level=0.1, fractions=(0.8, 0.1, 0.1), seed: int = 0,
              conservative: bool = False, threads: int = 1,
              predictor_params: dict | None = None,
              split: SplitResult | None = None) -> GeoCPResult:
    """Split, fit, score the calibration set, and build per-test intervals.

    ``predictor`` is a spec string (``"gbt"``, ``"kriging:exp"``, ...), a
    factory, or an unfitted model used as a template. Pass ``split`` to
    reuse an existing partition. Errors are re-raised as
    :class:`StageError` tagged with the failing stage.
    """
    t0 = time.perf_counter()
    if split is None:
        try:
            split = split_dataset(ds, fractions, seed)
        except GeoConformalError as exc:
            raise StageError("split", exc) from exc
    try:
        model = make_predictor(predictor, **(predictor_params or {}))
        model.fit(split.train)
    except GeoConformalError as exc:
        raise StageError("fit", exc) from exc
    t1 = time.perf_counter()
    res = conformalize(model, split.calib, split.test, kernel, bandwidth, level,
                       conservative, threads)
    res.split = split
    res.timing = {"fit": t1 - t0, **res.timing, "total": time.perf_counter() - t0}
    return res
