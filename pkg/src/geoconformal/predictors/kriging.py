"""Ordinary kriging with kriging variance."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from ..errors import FitError, GeoConformalError
from ..geo import Location, SpatialDataset, max_pairwise_distance, pairwise_distances
from .base import PredictorModel, register
from .variogram import (VariogramKind, VariogramModel, empirical_semivariogram,
                        fit_variogram)


class KrigingModel(PredictorModel):
    """Ordinary kriging on locations only.

    Parameters
    ----------
    variogram : str or VariogramModel
        Model family to fit from the training data, or a ready model.
    n_bins, max_lag : used when the variogram is fitted.
    """

    uses_features = False

    def __init__(self, variogram="exponential", n_bins=10, max_lag=None):
        super().__init__()
        if isinstance(variogram, dict):
            variogram = VariogramModel(**variogram)
        self.variogram = variogram if isinstance(variogram, VariogramModel) \
            else VariogramKind.parse(variogram)
        self.n_bins = int(n_bins)
        self.max_lag = max_lag
        self.vario: VariogramModel | None = None

    @property
    def kind(self):
        k = self.variogram.kind if isinstance(self.variogram, VariogramModel) else self.variogram
        return f"kriging:{k.short}"

    def get_params(self):
        v = self.variogram.as_dict() if isinstance(self.variogram, VariogramModel) \
            else self.variogram.value
        return {"variogram": v, "n_bins": self.n_bins, "max_lag": self.max_lag}

    def _fit(self, train):
        if len(train) < 2:
            raise FitError("kriging needs at least 2 training points")
        if isinstance(self.variogram, VariogramModel):
            self.vario = self.variogram
        else:
            emp = empirical_semivariogram(train, self.n_bins, self.max_lag)
            self.vario = fit_variogram(emp, self.variogram)
        self._setup(train.coords, train.target)

    def _setup(self, coords, target):
        self.coords = np.array(coords, dtype=float)
        self.z = np.array(target, dtype=float)
        n = len(self.z)
        crs = self._schema[0]
        d = pairwise_distances(self.coords, self.coords, crs)
        sill = self.vario.sill(max_pairwise_distance(self.coords, crs))
        # a zero sill (constant field) would leave the system singular
        self.eps_reg = 1e-10 * sill if sill > 0 else 1e-10
        a = np.zeros((n + 1, n + 1))
        a[:n, :n] = self._gamma(d)
        a[np.arange(n), np.arange(n)] += self.eps_reg
        a[:n, n] = a[n, :n] = 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                self._lu = lu_factor(a, check_finite=True)
            except (LinAlgWarning, np.linalg.LinAlgError, ValueError) as exc:
                cond = np.linalg.cond(a)
                raise FitError(f"singular kriging system (condition number {cond:.3e}): {exc}") from None
        if not np.all(np.isfinite(self._lu[0])) or np.any(np.diag(self._lu[0]) == 0):
            raise FitError(f"singular kriging system (condition number {np.linalg.cond(a):.3e})")

    def _gamma(self, d):
        g = self.vario(d)
        # nugget discontinuity: zero semivariance at zero separation
        return np.where(d == 0, 0.0, g)

    def solve(self, queries: SpatialDataset):
        """Kriging weights ``(q, n)`` and Lagrange multipliers ``(q,)``."""
        d = pairwise_distances(self.coords, queries.coords, self._schema[0])
        rhs = np.vstack([self._gamma(d), np.ones((1, d.shape[1]))])
        sol = lu_solve(self._lu, rhs)
        return sol[:-1].T, sol[-1], rhs[:-1].T

    def predict_with_variance(self, queries: SpatialDataset):
        self.validate_queries(queries)
        if len(queries) == 0:
            return np.zeros(0), np.zeros(0)
        lam, mu, g = self.solve(queries)
        value = lam @ self.z
        var = np.einsum("ij,ij->i", lam, g) + mu
        return value, np.maximum(var, 0.0)

    def _predict(self, queries):
        lam, _, _ = self.solve(queries)
        return lam @ self.z

    def _state(self):
        return {"vario": self.vario.as_dict(), "coords": self.coords, "z": self.z}

    def _set_state(self, state):
        self.vario = VariogramModel(**state["vario"])
        self._setup(np.asarray(state["coords"]), np.asarray(state["z"]))


def fit_kriging(train: SpatialDataset, vario) -> KrigingModel:
    return KrigingModel(vario).fit(train)


def ok_predict(model: KrigingModel, query: Location) -> tuple[float, float]:
    """Kriged value and kriging variance at one location."""
    if not isinstance(query, Location):
        raise GeoConformalError("query must be a Location")
    v, s = model.predict_with_variance(SpatialDataset.from_locations([query]))
    return float(v[0]), float(s[0])


def kriging_weights(model: KrigingModel, queries: SpatialDataset) -> np.ndarray:
    return model.solve(queries)[0]


for _k in VariogramKind:
    register(f"kriging:{_k.short}")(
        lambda _kind=_k, **p: KrigingModel(**{"variogram": _kind, **p}))
