"""Inverse-distance-weighted k-nearest-neighbour interpolator."""

from __future__ import annotations

import numpy as np

from ..errors import FitError
from ..geo import knn_indices
from .base import PredictorModel, register


class KnnModel(PredictorModel):
    """IDW over the ``k`` nearest training locations (power ``p``).

    Queries that coincide with training points return the mean target of
    the coincident points, so the interpolator is exact at the data.
    """

    kind = "knn"
    uses_features = False

    def __init__(self, k=8, power=2.0):
        super().__init__()
        self.k = int(k)
        self.power = float(power)
        if self.k < 1:
            raise FitError("k must be >= 1")

    def get_params(self):
        return {"k": self.k, "power": self.power}

    def _fit(self, train):
        self.coords = np.array(train.coords)
        self.z = np.array(train.target)

    def _predict(self, queries):
        k = min(self.k, len(self.z))
        idx, d = knn_indices(self.coords, queries.coords, k, self._schema[0])
        zn = self.z[idx]
        exact = d == 0
        with np.errstate(divide="ignore"):
            w = np.where(exact, 0.0, d ** -self.power)
        hit = exact.any(axis=1)
        w[hit] = exact[hit].astype(float)
        return np.sum(w * zn, axis=1) / np.sum(w, axis=1)

    def _state(self):
        return {"coords": self.coords, "z": self.z}

    def _set_state(self, state):
        self.coords = np.asarray(state["coords"], dtype=float)
        self.z = np.asarray(state["z"], dtype=float)


register("knn")(KnnModel)
