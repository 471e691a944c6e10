"""Predictor contract and the built-in models."""

from .base import (PREDICTOR_SPECS, PredictorModel, dumps_model, load_model, loads_model,
                   make_predictor, predict_batch, save_model)
from .dgsi import DgsiLiteModel, DgsiVariant, train_dgsi_lite
from .gbt import GbtModel, Tree, build_tree, train_gbt
from .knn import KnnModel
from .kriging import KrigingModel, fit_kriging, kriging_weights, ok_predict
from .variogram import (EmpiricalVariogram, VariogramKind, VariogramModel,
                        empirical_semivariogram, fit_variogram)

__all__ = [
    "PREDICTOR_SPECS", "PredictorModel", "make_predictor", "predict_batch",
    "save_model", "load_model", "dumps_model", "loads_model",
    "DgsiLiteModel", "DgsiVariant", "train_dgsi_lite",
    "GbtModel", "Tree", "build_tree", "train_gbt", "KnnModel",
    "KrigingModel", "fit_kriging", "ok_predict", "kriging_weights",
    "EmpiricalVariogram", "VariogramKind", "VariogramModel",
    "empirical_semivariogram", "fit_variogram",
]
