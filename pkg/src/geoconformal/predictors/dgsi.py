"""DGSI-lite: a small neural interpolator that learns neighbour weights.

For every query the ``k`` nearest training points are described by their
normalized distance and the (sin, cos) of the bearing from the query.
A two-layer tanh network maps the stacked neighbour descriptors to ``k``
logits; their softmax weights the neighbours' targets. Two variants
extend the per-neighbour descriptor:

* ``local``: the mean target of the ``k`` neighbours (standardized);
* ``loc``:   each neighbour's coordinates, scaled to the training extent.

Training is plain full-batch gradient descent on the squared error of
leave-one-out predictions over the training set. Input weights for the
variant extras start at zero and every other weight is drawn exactly as
for the base network with the same seed, so each variant starts out as
the base model and only departs from it where the extra input helps.
"""

from __future__ import annotations

import enum

import numpy as np

from ..errors import FitError, GeoConformalError
from ..geo import SpatialDataset, bearings, knn_indices, max_pairwise_distance
from .base import PredictorModel, register

N_BASE_INPUTS = 3


class DgsiVariant(enum.Enum):
    BASE = "base"
    LOCAL = "local"
    LOCATION = "loc"

    @classmethod
    def parse(cls, v) -> "DgsiVariant":
        if isinstance(v, DgsiVariant):
            return v
        aliases = {"localfeature": "local", "local_feature": "local", "location": "loc"}
        s = str(v).strip().lower()
        try:
            return cls(aliases.get(s, s))
        except ValueError:
            raise GeoConformalError(f"unknown DGSI variant {v!r}") from None

    @property
    def n_extra(self) -> int:
        return {"base": 0, "local": 1, "loc": 2}[self.value]


class DgsiLiteModel(PredictorModel):
    """Neighbour-weighting interpolator; see the module docstring."""

    uses_features = False

    def __init__(self, variant="base", k=6, hidden=32, epochs=300, learning_rate=0.01, seed=0):
        super().__init__()
        self.variant = DgsiVariant.parse(variant)
        self.k = int(k)
        self.hidden = int(hidden)
        self.epochs = int(epochs)
        self.learning_rate = float(learning_rate)
        self.seed = int(seed)
        if self.k < 1 or self.hidden < 1 or self.epochs < 0 or not self.learning_rate > 0:
            raise FitError("invalid DGSI-lite hyperparameters")
        self.loss_history = np.zeros(0)

    @property
    def kind(self):
        return f"dgsi:{self.variant.value}"

    def get_params(self):
        return {"variant": self.variant.value, "k": self.k, "hidden": self.hidden,
                "epochs": self.epochs, "learning_rate": self.learning_rate, "seed": self.seed}

    @property
    def n_inputs(self) -> int:
        return N_BASE_INPUTS + self.variant.n_extra

    # -- inputs ----------------------------------------------------------
    def _normalizers(self, coords, z):
        d = max_pairwise_distance(coords, self._schema[0])
        self.d_scale = d if d > 0 else 1.0
        self.z_mean = float(z.mean())
        sd = float(z.std())
        self.z_scale = sd if sd > 0 else 1.0
        self.xy_min = coords.min(axis=0)
        span = float(np.ptp(coords, axis=0).max())
        self.xy_span = span if span > 0 else 1.0

    def _inputs(self, query_coords, exclude_self=False):
        """Stacked descriptors ``(q, k * n_inputs)``, neighbour indices ``(q, k)``."""
        crs = self._schema[0]
        idx, dist = knn_indices(self.coords, query_coords, self.k, crs, exclude_self=exclude_self)
        theta = bearings(np.asarray(query_coords)[:, None, :], self.coords[idx], crs)
        parts = [dist / self.d_scale, np.sin(theta), np.cos(theta)]
        if self.variant is DgsiVariant.LOCAL:
            zs = (self.z[idx] - self.z_mean) / self.z_scale
            parts.append(np.repeat(zs.mean(axis=1, keepdims=True), self.k, axis=1))
        elif self.variant is DgsiVariant.LOCATION:
            xy = (self.coords[idx] - self.xy_min) / self.xy_span
            parts += [xy[..., 0], xy[..., 1]]
        X = np.stack(parts, axis=-1).reshape(len(idx), -1)
        return X, idx

    # -- network ---------------------------------------------------------
    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        k, h, f = self.k, self.hidden, self.n_inputs

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        w1_base = glorot(k * N_BASE_INPUTS, h)
        w1 = np.zeros((k * f, h))
        for j in range(k):
            w1[j * f:j * f + N_BASE_INPUTS] = w1_base[j * N_BASE_INPUTS:(j + 1) * N_BASE_INPUTS]
        return {"w1": w1, "b1": np.zeros(h),
                "w2": glorot(h, h), "b2": np.zeros(h),
                "w3": glorot(h, k), "b3": np.zeros(k)}

    @staticmethod
    def _forward(p, X):
        h1 = np.tanh(X @ p["w1"] + p["b1"])
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        logits = h2 @ p["w3"] + p["b3"]
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        w = e / e.sum(axis=1, keepdims=True)
        return w, (h1, h2)

    @classmethod
    def loss_and_grad(cls, p, X, zn, y):
        """Mean squared error of ``sum(w * zn)`` against ``y`` and its gradient."""
        w, (h1, h2) = cls._forward(p, X)
        pred = np.sum(w * zn, axis=1)
        err = pred - y
        loss = float(np.mean(err ** 2))
        dpred = 2.0 * err / len(y)
        dw = dpred[:, None] * zn
        dlogit = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        g = {"w3": h2.T @ dlogit, "b3": dlogit.sum(axis=0)}
        da2 = (dlogit @ p["w3"].T) * (1.0 - h2 ** 2)
        g["w2"], g["b2"] = h1.T @ da2, da2.sum(axis=0)
        da1 = (da2 @ p["w2"].T) * (1.0 - h1 ** 2)
        g["w1"], g["b1"] = X.T @ da1, da1.sum(axis=0)
        return loss, g

    # -- fit / predict ---------------------------------------------------
    def _fit(self, train):
        n = len(train)
        if self.k >= n:
            raise FitError(f"DGSI-lite needs more than k={self.k} training points, got {n}")
        self.coords = np.array(train.coords)
        self.z = np.array(train.target)
        self._normalizers(self.coords, self.z)
        X, idx = self._inputs(self.coords, exclude_self=True)
        zn = (self.z[idx] - self.z_mean) / self.z_scale
        y = (self.z - self.z_mean) / self.z_scale
        p = self._init_params()
        history = []
        for epoch in range(self.epochs + 1):
            loss, g = self.loss_and_grad(p, X, zn, y)
            if not np.isfinite(loss):
                raise FitError(f"non-finite training loss at epoch {epoch}")
            history.append(loss)
            if epoch == self.epochs:
                break
            for name in p:
                p[name] = p[name] - self.learning_rate * g[name]
        self.params = p
        self.loss_history = np.array(history)

    def neighbor_weights(self, queries: SpatialDataset):
        """Neighbour indices and softmax weights, both ``(q, k)``."""
        self.validate_queries(queries)
        X, idx = self._inputs(queries.coords)
        w, _ = self._forward(self.params, X)
        return idx, w

    def _predict(self, queries):
        X, idx = self._inputs(queries.coords)
        w, _ = self._forward(self.params, X)
        zn = self.z[idx]
        # anchored at the smallest neighbour value so equal targets come back exactly
        lo = zn.min(axis=1)
        return lo + np.sum(w * (zn - lo[:, None]), axis=1)

    def _state(self):
        return {"coords": self.coords, "z": self.z,
                "params": {k: v for k, v in self.params.items()},
                "loss_history": self.loss_history}

    def _set_state(self, state):
        self.coords = np.asarray(state["coords"], dtype=float)
        self.z = np.asarray(state["z"], dtype=float)
        self._normalizers(self.coords, self.z)
        self.params = {k: np.asarray(v, dtype=float) for k, v in state["params"].items()}
        self.loss_history = np.asarray(state["loss_history"], dtype=float)


def train_dgsi_lite(train: SpatialDataset, variant="base", seed=0, **hyper) -> DgsiLiteModel:
    return DgsiLiteModel(variant, seed=seed, **hyper).fit(train)


for _v in DgsiVariant:
    register(f"dgsi:{_v.value}")(lambda _var=_v, **p: DgsiLiteModel(**{"variant": _var, **p}))
