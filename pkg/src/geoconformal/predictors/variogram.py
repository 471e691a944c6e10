"""Empirical semivariograms and weighted least-squares model fitting."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, nnls

from ..errors import FitError, GeoConformalError
from ..geo import SpatialDataset, pairwise_distances


class VariogramKind(enum.Enum):
    EXPONENTIAL = "exponential"
    LINEAR = "linear"
    GAUSSIAN = "gaussian"

    @classmethod
    def parse(cls, value) -> "VariogramKind":
        if isinstance(value, VariogramKind):
            return value
        aliases = {"exp": "exponential", "lin": "linear", "gau": "gaussian"}
        v = str(value).strip().lower()
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise GeoConformalError(f"unknown variogram model {value!r}") from None

    @property
    def short(self) -> str:
        return self.value[:3]

    @property
    def n_params(self) -> int:
        return 2 if self is VariogramKind.LINEAR else 3


@dataclass(frozen=True)
class EmpiricalVariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    max_lag: float

    def __len__(self):
        return len(self.lags)


@dataclass(frozen=True)
class VariogramModel:
    """Parametric semivariogram.

    exponential: ``c0 + c1 * (1 - exp(-h / a))``
    gaussian:    ``c0 + c1 * (1 - exp(-(h / a)**2))``
    linear:      ``c0 + b * h``
    """

    kind: VariogramKind
    nugget: float = 0.0
    psill: float = 0.0
    range: float = 1.0
    slope: float = 0.0
    residual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", VariogramKind.parse(self.kind))
        if self.nugget < 0 or self.psill < 0 or self.slope < 0 or not self.range > 0:
            raise GeoConformalError(f"invalid variogram parameters: {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        if self.kind is VariogramKind.LINEAR:
            return self.nugget + self.slope * h
        return self.nugget + self.psill * _shape(self.kind, h, self.range)

    def sill(self, max_dist: float = 1.0) -> float:
        """Total sill; for the unbounded linear model, the value at ``max_dist``."""
        if self.kind is VariogramKind.LINEAR:
            return self.nugget + self.slope * max_dist
        return self.nugget + self.psill

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "nugget": self.nugget, "psill": self.psill,
                "range": self.range, "slope": self.slope, "residual": self.residual}


def _shape(kind: VariogramKind, h, a):
    if kind is VariogramKind.EXPONENTIAL:
        return 1.0 - np.exp(-h / a)
    return 1.0 - np.exp(-(h / a) ** 2)


def empirical_semivariogram(train: SpatialDataset, n_bins: int = 10,
                            max_lag: float | None = None) -> EmpiricalVariogram:
    """Binned semivariance ``sum((z_i - z_j)**2) / (2 N(h))`` over point pairs.

    Bins split ``[0, max_lag]`` evenly and are reported at their midpoints;
    empty bins are dropped. ``max_lag`` defaults to half the largest
    pairwise distance.
    """
    n = len(train)
    if n < 2:
        raise GeoConformalError("semivariogram needs at least 2 points")
    if n_bins < 1:
        raise GeoConformalError("n_bins must be >= 1")
    d = pairwise_distances(train.coords, train.coords, train.crs)
    iu = np.triu_indices(n, k=1)
    d = d[iu]
    z = train.target
    sq = (z[iu[0]] - z[iu[1]]) ** 2
    if max_lag is None:
        max_lag = d.max() / 2 if d.max() > 0 else 1.0
    if not max_lag > 0:
        raise GeoConformalError("max_lag must be > 0")
    keep = d <= max_lag
    d, sq = d[keep], sq[keep]
    width = max_lag / n_bins
    b = np.minimum((d / width).astype(int), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sums = np.bincount(b, weights=sq, minlength=n_bins)
    nz = counts > 0
    mids = (np.arange(n_bins) + 0.5) * width
    return EmpiricalVariogram(mids[nz], sums[nz] / (2 * counts[nz]),
                              counts[nz].astype(float), float(max_lag))


def _wnnls(design, gamma, w):
    sw = np.sqrt(w)
    coef, _ = nnls(design * sw[:, None], gamma * sw)
    resid = float(np.sum(w * (design @ coef - gamma) ** 2))
    return coef, resid


def fit_variogram(emp: EmpiricalVariogram, kind="exponential") -> VariogramModel:
    """Weighted least-squares fit, pair counts as weights.

    Nugget, sill and slope enter linearly and are solved exactly by
    nonnegative least squares for each candidate range; the range is
    searched on a log grid over ``(0, 3 * max_lag]`` and refined with a
    bounded scalar minimizer around the best grid node.
    """
    kind = VariogramKind.parse(kind)
    if len(emp) < kind.n_params:
        raise FitError(f"{kind.value} variogram needs >= {kind.n_params} bins, got {len(emp)}")
    h, g, w = emp.lags, emp.gamma, emp.counts
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise FitError("non-finite semivariance values")

    if kind is VariogramKind.LINEAR:
        coef, resid = _wnnls(np.column_stack([np.ones_like(h), h]), g, w)
        if not np.isfinite(resid):
            raise FitError("variogram objective is not finite")
        return VariogramModel(kind, nugget=float(coef[0]), slope=float(coef[1]), residual=resid)

    def objective(a):
        design = np.column_stack([np.ones_like(h), _shape(kind, h, a)])
        return _wnnls(design, g, w)

    a_max = 3.0 * emp.max_lag
    grid = np.geomspace(a_max * 1e-3, a_max, 121)
    scores = np.array([objective(a)[1] for a in grid])
    if not np.all(np.isfinite(scores)):
        raise FitError("variogram objective is not finite")
    i = int(np.argmin(scores))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best_a, best_r = grid[i], scores[i]
    if hi > lo:
        res = minimize_scalar(lambda a: objective(a)[1], bounds=(lo, hi), method="bounded",
                              options={"xatol": lo * 1e-10, "maxiter": 500})
        if res.success and np.isfinite(res.fun) and res.fun <= best_r:
            best_a, best_r = float(res.x), float(res.fun)
    coef, resid = objective(best_a)
    return VariogramModel(kind, nugget=float(coef[0]), psill=float(coef[1]),
                          range=float(best_a), residual=resid)
