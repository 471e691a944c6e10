"""Synthetic spatial scenes with known generating laws.

Gaussian random fields are drawn exactly via a Cholesky factor of the
covariance matrix. Regression scenes add heteroscedastic Gaussian noise
with a named standard-deviation profile to a closed-form trend::

    trend(x, y, u) = 2 u + sin(2 pi sx) + cos(2 pi sy)

where ``sx, sy`` are the coordinates scaled to ``[0, 1]`` over the scene
extent and ``u ~ U(0, 1)`` is an aspatial covariate stored as feature
``"u"``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GeoConformalError
from .geo import CRS, Location, SpatialDataset, pairwise_distances


class CovarianceKind(enum.Enum):
    EXPONENTIAL = "exponential"
    GAUSSIAN = "gaussian"
    NUGGET = "nugget"


@dataclass(frozen=True)
class FieldSpec:
    kind: CovarianceKind = CovarianceKind.EXPONENTIAL
    sill: float = 1.0
    range: float = 1.0
    nugget: float = 0.0
    mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CovarianceKind(self.kind))
        if self.sill < 0 or self.nugget < 0 or not self.range > 0:
            raise GeoConformalError(f"invalid field spec: {self}")


def covariance_matrix(spec: FieldSpec, coords, crs=CRS.PLANAR) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    n = len(coords)
    if spec.kind is CovarianceKind.NUGGET:
        c = spec.sill * np.eye(n)
    else:
        h = pairwise_distances(coords, coords, crs) / spec.range
        rho = np.exp(-h) if spec.kind is CovarianceKind.EXPONENTIAL else np.exp(-h * h)
        c = spec.sill * rho
    return c + spec.nugget * np.eye(n)


def _coords_of(locations):
    if isinstance(locations, SpatialDataset):
        return locations.coords, locations.crs
    locations = list(locations) if not isinstance(locations, np.ndarray) else locations
    if len(locations) and isinstance(locations[0], Location):
        return np.array([[l.x, l.y] for l in locations]), locations[0].crs
    return np.asarray(locations, dtype=float).reshape(-1, 2), CRS.PLANAR


def sample_gaussian_field(spec: FieldSpec, locations, seed: int = 0) -> np.ndarray:
    """One exact draw of the field at ``locations`` (array, Locations or dataset).

    A small diagonal jitter is added only if the plain Cholesky
    factorization fails (near-singular Gaussian covariances).
    """
    coords, crs = _coords_of(locations)
    n = len(coords)
    if n < 1:
        raise GeoConformalError("need at least one location")
    if spec.sill == 0 and spec.nugget == 0:
        return np.full(n, float(spec.mean))
    c = covariance_matrix(spec, coords, crs)
    scale = float(np.max(np.diag(c)))
    for jitter in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            L = np.linalg.cholesky(c + jitter * scale * np.eye(n))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise GeoConformalError("covariance matrix is not factorizable")
    z = np.random.default_rng(seed).standard_normal(n)
    return spec.mean + L @ z


# --------------------------------------------------------------------------
# regression scenes

class Sampling(enum.Enum):
    UNIFORM = "uniform"
    CLUSTERED = "clustered"


class NoiseKind(enum.Enum):
    CONSTANT = "constant"
    LINEAR_RAMP = "ramp"
    TWO_REGION = "two_region"


@dataclass(frozen=True)
class NoiseProfile:
    """Noise standard deviation as a function of the scaled x coordinate.

    constant: ``low`` everywhere; ramp: ``low`` at the west edge rising
    linearly to ``high`` at the east edge; two_region: ``low`` on the west
    half, ``high`` on the east half.
    """

    kind: NoiseKind = NoiseKind.CONSTANT
    low: float = 1.0
    high: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.low < 0 or self.high < 0:
            raise GeoConformalError("noise standard deviations must be >= 0")

    def sigma(self, sx) -> np.ndarray:
        sx = np.asarray(sx, dtype=float)
        if self.kind is NoiseKind.CONSTANT:
            return np.full(sx.shape, self.low)
        if self.kind is NoiseKind.LINEAR_RAMP:
            return self.low + (self.high - self.low) * np.clip(sx, 0, 1)
        return np.where(sx < 0.5, self.low, self.high)


@dataclass(frozen=True)
class SceneSpec:
    n: int = 500
    extent: tuple = (0.0, 0.0, 100.0, 100.0)
    sampling: Sampling = Sampling.UNIFORM
    noise: NoiseProfile = NoiseProfile()
    seed: int = 0
    n_clusters: int = 5
    cluster_spread: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        x0, y0, x1, y1 = self.extent
        if not (np.isfinite([x0, y0, x1, y1]).all() and x1 > x0 and y1 > y0):
            raise GeoConformalError(f"invalid extent {self.extent}")
        if self.n < 10:
            raise GeoConformalError("a scene needs at least 10 points")


def scene_trend(coords, u, extent) -> np.ndarray:
    sx, sy = _scaled(coords, extent)
    return 2.0 * np.asarray(u) + np.sin(2 * np.pi * sx) + np.cos(2 * np.pi * sy)


def _scaled(coords, extent):
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    x0, y0, x1, y1 = extent
    return (coords[:, 0] - x0) / (x1 - x0), (coords[:, 1] - y0) / (y1 - y0)


def sample_locations(spec: SceneSpec, rng) -> np.ndarray:
    x0, y0, x1, y1 = spec.extent
    lo, span = np.array([x0, y0]), np.array([x1 - x0, y1 - y0])
    if spec.sampling is Sampling.UNIFORM:
        return lo + rng.uniform(size=(spec.n, 2)) * span
    centers = rng.uniform(0.1, 0.9, size=(spec.n_clusters, 2))
    which = rng.integers(0, spec.n_clusters, size=spec.n)
    pts = centers[which] + rng.normal(0, spec.cluster_spread, size=(spec.n, 2))
    return lo + np.clip(pts, 0, 1) * span


def make_regression_scene(spec: SceneSpec):
    """Sample a scene; returns ``(dataset, sigma_fn)``.

    ``sigma_fn(coords)`` gives the true noise standard deviation at any
    coordinates, for oracle coverage checks.
    """
    rng = np.random.default_rng(spec.seed)
    coords = sample_locations(spec, rng)
    u = rng.uniform(size=spec.n)
    eps = rng.standard_normal(spec.n)

    def sigma_fn(xy):
        return spec.noise.sigma(_scaled(xy, spec.extent)[0])

    target = scene_trend(coords, u, spec.extent) + sigma_fn(coords) * eps
    ds = SpatialDataset(coords, u[:, None], target, ("u",), CRS.PLANAR)
    return ds, sigma_fn


def make_field_scene(n: int, field: FieldSpec, extent=(0.0, 0.0, 100.0, 100.0),
                     seed: int = 0) -> SpatialDataset:
    """Uniformly scattered points carrying one Gaussian random field draw."""
    spec = SceneSpec(n=n, extent=extent, seed=seed)
    rng = np.random.default_rng(seed)
    coords = sample_locations(spec, rng)
    z = sample_gaussian_field(field, coords, seed=int(rng.integers(2**31)))
    return SpatialDataset(coords, np.zeros((n, 0)), z, (), CRS.PLANAR)


def make_field_days(n_days: int, n_points: int = 90, seed: int = 0,
                    extent=(0.0, 0.0, 100.0, 100.0), kind="gaussian",
                    range_frac=(0.05, 0.6), nugget_frac=(0.0, 0.5)) -> list[SpatialDataset]:
    """A run of autocorrelated "days" whose spatial structure varies day to day.

    Each day draws its own station layout, a covariance range uniformly
    within ``range_frac`` of the extent width and a nugget share within
    ``nugget_frac`` (sill + nugget = 1, mean 15), so the global
    autocorrelation spans weak to strong.
    """
    rng = np.random.default_rng(seed)
    width = extent[2] - extent[0]
    days = []
    for _ in range(n_days):
        rng_range = width * rng.uniform(*range_frac)
        nug = rng.uniform(*nugget_frac)
        spec = FieldSpec(CovarianceKind(kind), sill=1.0 - nug, range=rng_range,
                         nugget=nug, mean=15.0)
        days.append(make_field_scene(n_points, spec, extent, seed=int(rng.integers(2**31))))
    return days


def make_zoned_days(n_days: int, n_points: int = 300, seed: int = 0,
                    extent=(0.0, 0.0, 100.0, 100.0), amplitude=(0.0, 4.0),
                    noise=(0.2, 1.0), zone_start: float = 0.6) -> list[SpatialDataset]:
    """Days with a warm, noisy zone whose strength changes from day to day.

    Each day is a smooth field (Gaussian covariance, unit sill, range 10-30%
    of the width, mean 15) plus a warm anomaly ``A * ramp(sx)`` covering the
    east of the domain, with ``ramp`` rising smoothly from 0 at
    ``sx = zone_start`` to 1 at the east edge and ``A`` drawn uniformly from
    ``amplitude``. Independent noise has standard deviation ``noise[0]``
    outside the zone rising to ``noise[1]`` with the ramp. Strong-anomaly
    days therefore cluster extreme values where the data are also hardest
    to interpolate.
    """
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = extent
    days = []
    for _ in range(n_days):
        day_seed = int(rng.integers(2**31))
        a = rng.uniform(*amplitude)
        rng_range = (x1 - x0) * rng.uniform(0.1, 0.3)
        drng = np.random.default_rng(day_seed)
        coords = sample_locations(SceneSpec(n=n_points, extent=extent), drng)
        smooth = sample_gaussian_field(FieldSpec(CovarianceKind.GAUSSIAN, 1.0, rng_range, 0.0, 15.0),
                                       coords, seed=int(drng.integers(2**31)))
        sx = (coords[:, 0] - x0) / (x1 - x0)
        t = np.clip((sx - zone_start) / (1.0 - zone_start), 0.0, 1.0)
        ramp = t * t * (3.0 - 2.0 * t)
        sigma = noise[0] + (noise[1] - noise[0]) * ramp
        z = smooth + a * ramp + sigma * drng.standard_normal(n_points)
        days.append(SpatialDataset(coords, np.zeros((n_points, 0)), z, (), CRS.PLANAR))
    return days
