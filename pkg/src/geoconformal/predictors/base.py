"""Predictor contract, registry and the text model format."""

from __future__ import annotations

import abc
import json
import os
from typing import Callable, Sequence

import numpy as np

from ..errors import CRSMismatchError, FitError, GeoConformalError, SchemaError
from ..geo import CRS, Location, SpatialDataset, SpatialRecord

MODEL_FORMAT = "geoconformal-model"
MODEL_FORMAT_VERSION = 1


class PredictorModel(abc.ABC):
    """A regressor ``f`` mapping a record (location and/or features) to a value.

    Subclasses implement :meth:`_fit` and :meth:`_predict`; the public
    wrappers handle validation. A fitted model is never mutated by
    :meth:`predict`, so one instance can serve many threads.
    """

    kind: str = "abstract"
    uses_features: bool = False

    def __init__(self):
        self._schema = None

    @property
    def fitted(self) -> bool:
        return self._schema is not None

    def fit(self, train: SpatialDataset) -> "PredictorModel":
        if len(train) == 0:
            raise FitError("cannot fit on an empty dataset")
        if not train.has_target:
            raise FitError("training targets must be finite")
        self._schema = (train.crs, train.n_features)
        self._fit(train)
        return self

    def validate_queries(self, queries: SpatialDataset) -> None:
        if not self.fitted:
            raise GeoConformalError(f"{self.kind} model is not fitted")
        crs, p = self._schema
        if queries.crs is not crs and len(queries):
            raise CRSMismatchError(crs, queries.crs)
        if self.uses_features and queries.n_features != p and len(queries):
            raise SchemaError(f"model expects {p} features, queries have {queries.n_features}")

    def predict(self, queries: SpatialDataset) -> np.ndarray:
        self.validate_queries(queries)
        if len(queries) == 0:
            return np.zeros(0)
        return np.asarray(self._predict(queries), dtype=float)

    @abc.abstractmethod
    def _fit(self, train: SpatialDataset) -> None: ...

    @abc.abstractmethod
    def _predict(self, queries: SpatialDataset) -> np.ndarray: ...

    # persistence -------------------------------------------------------
    def get_params(self) -> dict:
        return {}

    def _state(self) -> dict:
        raise NotImplementedError

    def _set_state(self, state: dict) -> None:
        raise NotImplementedError

    def __repr__(self):
        params = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({params})"


def _as_dataset(queries, like: PredictorModel | None = None) -> SpatialDataset:
    if isinstance(queries, SpatialDataset):
        return queries
    queries = list(queries)
    if not queries:
        return SpatialDataset(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros(0))
    if all(isinstance(q, Location) for q in queries):
        ds = SpatialDataset.from_locations(queries)
        if like is not None and like.uses_features and like.fitted and like._schema[1]:
            raise SchemaError("model needs features; bare locations given")
        return ds
    if all(isinstance(q, SpatialRecord) for q in queries):
        p = len(queries[0].features)
        return SpatialDataset.from_records(queries, [f"f{i}" for i in range(p)])
    raise SchemaError("queries must be a SpatialDataset, Locations or SpatialRecords")


def predict_batch(model: PredictorModel, queries) -> np.ndarray:
    """Predict for each query, preserving order.

    ``queries`` may be a :class:`SpatialDataset` or a sequence of
    :class:`Location` / :class:`SpatialRecord`.
    """
    return model.predict(_as_dataset(queries, model))


# --------------------------------------------------------------------------
# registry

_REGISTRY: dict[str, Callable[..., PredictorModel]] = {}

PREDICTOR_SPECS = ("kriging:exp", "kriging:lin", "kriging:gau",
                   "dgsi:base", "dgsi:local", "dgsi:loc", "gbt", "knn")


def register(name: str):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory
    return deco


def make_predictor(spec: "str | Callable[[], PredictorModel] | PredictorModel", **params) -> PredictorModel:
    """Build a fresh, unfitted model from a spec string such as ``"kriging:exp"``.

    A callable is invoked as a factory; a model instance is cloned from its
    parameters so repeated calls never share fitted state.
    """
    if isinstance(spec, PredictorModel):
        return type(spec)(**{**spec.get_params(), **params})
    if callable(spec):
        return spec(**params)
    from . import dgsi, gbt, knn, kriging  # noqa: F401  (populate registry)
    name = str(spec).strip().lower()
    if name not in _REGISTRY:
        raise GeoConformalError(
            f"unknown predictor {spec!r}; choose from {', '.join(PREDICTOR_SPECS)}")
    return _REGISTRY[name](**params)


# --------------------------------------------------------------------------
# text format
#
# line 1:  "geoconformal-model <version>"
# line 2+: JSON object {"kind", "crs", "n_features", "params", "state"}
# Floats are written with repr(), so a save/load cycle reproduces every
# parameter bit for bit.

def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "value") and hasattr(type(v), "__members__"):
        return v.value
    return v


def dumps_model(model: PredictorModel) -> str:
    if not model.fitted:
        raise GeoConformalError("only fitted models can be saved")
    body = {
        "kind": model.kind,
        "crs": model._schema[0].value,
        "n_features": model._schema[1],
        "params": _jsonable(model.get_params()),
        "state": _jsonable(model._state()),
    }
    return f"{MODEL_FORMAT} {MODEL_FORMAT_VERSION}\n" + json.dumps(body, indent=1) + "\n"


def loads_model(text: str) -> PredictorModel:
    head, _, rest = text.partition("\n")
    parts = head.split()
    if len(parts) != 2 or parts[0] != MODEL_FORMAT:
        raise GeoConformalError("not a geoconformal model file")
    if int(parts[1]) != MODEL_FORMAT_VERSION:
        raise GeoConformalError(f"unsupported model format version {parts[1]}")
    body = json.loads(rest)
    model = make_predictor(body["kind"], **body["params"])
    model._schema = (CRS.parse(body["crs"]), int(body["n_features"]))
    model._set_state(body["state"])
    return model


def save_model(model: PredictorModel, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))
    os.replace(tmp, path)


def load_model(path) -> PredictorModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
