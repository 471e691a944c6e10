"""Multi-run experiment pipelines built on :func:`geocp_run`.

Each pipeline returns an :class:`ExperimentResult`: a mapping of relative
file paths to rendered text (one run bundle per sub-run, plus comparison
tables) and a metrics dictionary for the summary. Nothing is written
here, so callers can fail cleanly before touching the disk.

regression_features
    GBT on the aspatial features vs GBT with the coordinates appended,
    sharing one split; per-point uncertainty and absolute-error differences.
interpolation_compare
    Ordinary kriging (exponential, linear, Gaussian) and DGSI-lite on each
    dataset ("day"): RMSE, plain CP length, GeoCP uncertainty, kriging
    variance, Moran's I of the uncertainty and the two-level dependence
    analysis.
feature_variants
    DGSI-lite base / local / loc per day: uncertainty deltas against base,
    uncertainty-change correlations and dependence analysis per variant.

Shared ``predictor_params`` are passed to each model restricted to the
keys it accepts, so one set can tune DGSI-lite next to kriging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conformal import GeoCPResult, cp_quantile, geocp_run
from .diagnostics import (DependenceRun, build_spatial_weights, coverage_from_bounds,
                          dependence_analysis, local_morans_i, morans_i, pearson_corr, rmse,
                          uncertainty_change_analysis)
from .errors import GeoConformalError, StageError
from .geo import SpatialDataset, split_dataset
from .predictors import make_predictor
from .reports import csv_text, geojson_text, intervals_csv, json_text, table_csv

EXPERIMENTS = ("regression-features", "interpolation-compare", "feature-variants")
INTERPOLATORS = ("kriging:exp", "kriging:lin", "kriging:gau", "dgsi:base")
VARIANTS = ("base", "local", "loc")


@dataclass
class ExperimentResult:
    files: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


def _or_none(fn, *args):
    try:
        return fn(*args)
    except GeoConformalError:
        return None


def holdout_weights(test: SpatialDataset, k: int = 8):
    """KNN weights on the test points, ``k`` capped at ``n - 1``."""
    if len(test) < 3:
        return None
    return build_spatial_weights(test, "knn", k=min(k, len(test) - 1))


def run_bundle(res: GeoCPResult, W=None, prefix: str = "") -> tuple[dict, dict]:
    """Files and metrics of one GeoCP run.

    ``local_i`` in the GeoJSON is the local Moran's I of the uncertainty
    (null when it is undefined, e.g. for a constant uncertainty surface).
    """
    test = res.test
    u = res.uncertainty
    if W is None:
        W = holdout_weights(test)
    local_i = _or_none(local_morans_i, u, W) if W is not None else None
    moran = _or_none(morans_i, u, W) if W is not None else None
    cov = None
    if test.has_target and len(test):
        cov = coverage_from_bounds(res.lower, res.upper, test.target, res.level.epsilon)
    metrics = {
        "n_train": len(res.split.train) if res.split else None,
        "n_calib": res.profile.m,
        "n_test": len(test),
        "coverage": cov.as_dict() if cov else None,
        "rmse": rmse(res.predictions, test.target) if cov else None,
        "mean_uncertainty": float(np.mean(u)) if len(u) else None,
        "cp_length": 2.0 * cp_quantile(res.profile, res.level),
        "kernel": res.kernel.family.value,
        "bandwidth": res.kernel.bandwidth,
        "moran_i_uncertainty": moran.as_dict() if moran else None,
    }
    if cov:
        metrics["error_uncertainty_corr"] = _or_none(
            pearson_corr, np.abs(res.predictions - test.target), u)
    files = {
        prefix + "intervals.csv": intervals_csv(test.coords, test.target, res.predictions,
                                                res.q_hat),
        prefix + "coverage.json": json_text(cov.as_dict() if cov else {}),
        prefix + "uncertainty.geojson": geojson_text(test.coords, {"uncertainty": u,
                                                                   "local_i": local_i}),
    }
    return files, metrics


def _slug(name: str) -> str:
    return name.replace(":", "-")


def params_for(spec: str, params: dict | None) -> dict:
    """The subset of ``params`` that predictor ``spec`` accepts."""
    if not params:
        return {}
    accepted = make_predictor(spec).get_params()
    return {k: v for k, v in params.items() if k in accepted}


def _run(ds, predictor, split, opts, stage):
    try:
        return geocp_run(ds, predictor, opts.get("kernel", "gaussian"),
                         opts.get("bandwidth", "median"), opts.get("level", 0.1),
                         split=split, threads=opts.get("threads", 1),
                         predictor_params=params_for(predictor, opts.get("predictor_params")))
    except GeoConformalError as exc:
        raise StageError(stage, exc) from exc


def _split(ds, opts, offset=0):
    try:
        return split_dataset(ds, opts.get("fractions", (0.8, 0.1, 0.1)),
                             opts.get("seed", 0) + offset)
    except GeoConformalError as exc:
        raise StageError("split", exc) from exc


# --------------------------------------------------------------------------

def regression_features(ds: SpatialDataset, **opts) -> ExperimentResult:
    """Aspatial vs aspatial+spatial GBT on one shared split."""
    if ds.n_features == 0:
        raise GeoConformalError("regression-features needs at least one feature column")
    out = ExperimentResult()
    runs = {}
    for name, data in (("aspatial", ds), ("spatial", ds.with_coords_as_features())):
        split = _split(data, opts)
        res = _run(data, "gbt", split, opts, name)
        files, metrics = run_bundle(res, prefix=f"{name}/")
        out.files.update(files)
        out.metrics[name] = metrics
        out.timing[name] = res.timing["total"]
        runs[name] = res
    a, s = runs["aspatial"], runs["spatial"]
    test = a.test
    du = s.uncertainty - a.uncertainty
    de = np.abs(s.predictions - test.target) - np.abs(a.predictions - test.target)
    out.files["differences.csv"] = table_csv({"x": test.coords[:, 0], "y": test.coords[:, 1],
                                              "uncertainty_diff": du, "error_diff": de})
    out.files["differences.geojson"] = geojson_text(test.coords, {"uncertainty_diff": du,
                                                                  "error_diff": de})
    ua, us = out.metrics["aspatial"]["mean_uncertainty"], out.metrics["spatial"]["mean_uncertainty"]
    out.metrics["comparison"] = {
        "mean_uncertainty_diff": float(np.mean(du)),
        "relative_uncertainty_reduction": (ua - us) / ua if ua else None,
        "mean_error_diff": float(np.mean(de)),
        "frac_points_less_uncertain": float(np.mean(du < 0)),
    }
    return out


def interpolation_compare(days: dict, models=INTERPOLATORS, k: int = 8,
                          **opts) -> ExperimentResult:
    """Kriging variants and DGSI-lite on each day, with shared splits."""
    out = ExperimentResult()
    rows = []
    dep_runs = {m: [] for m in models}
    for j, (day, ds) in enumerate(days.items()):
        split = _split(ds, opts, j)
        W = holdout_weights(split.test, k)
        for model in models:
            res = _run(ds, model, split, opts, f"{day}/{model}")
            files, metrics = run_bundle(res, W, prefix=f"{day}/{_slug(model)}/")
            kvar = None
            if model.startswith("kriging"):
                kvar = float(np.mean(res.model.predict_with_variance(split.test)[1]))
            out.files.update(files)
            out.timing[f"{day}/{model}"] = res.timing["total"]
            mi = metrics["moran_i_uncertainty"]
            rows.append([day, model, metrics["rmse"], metrics["coverage"]["coverage"],
                         metrics["mean_uncertainty"], metrics["cp_length"],
                         np.nan if kvar is None else kvar,
                         np.nan if mi is None else mi["I"]])
            if W is not None:
                dep_runs[model].append(DependenceRun(res.uncertainty, split.test.target, W, day))
    cols = ["day", "model", "rmse", "coverage", "mean_uncertainty", "cp_length",
            "kriging_variance", "moran_i_uncertainty"]
    out.files["series.csv"] = csv_text(cols, rows)
    per_model = {}
    for model in models:
        r = [row for row in rows if row[1] == model]
        arr = np.array([row[2:] for row in r], dtype=float)
        mi = arr[:, 5]
        dep = dependence_analysis(dep_runs[model]) if len(dep_runs[model]) else None
        per_model[model] = {
            "mean_rmse": float(np.mean(arr[:, 0])),
            "mean_coverage": float(np.mean(arr[:, 1])),
            "mean_uncertainty": float(np.mean(arr[:, 2])),
            "mean_cp_length": float(np.mean(arr[:, 3])),
            "mean_kriging_variance": float(np.nanmean(arr[:, 4])) if model.startswith("kriging")
            else None,
            "moran_i_uncertainty": mi.tolist(),
            "frac_days_moran_above_0.1": float(np.mean(mi[np.isfinite(mi)] > 0.1))
            if np.isfinite(mi).any() else None,
            "dependence": dep.as_dict() if dep else None,
        }
    out.metrics = {"n_days": len(days), "models": per_model,
                   "ranking_by_rmse": sorted(models, key=lambda m: per_model[m]["mean_rmse"])}
    return out


def feature_variants(days: dict, variants=VARIANTS, k: int = 8, high_i: float = 0.3,
                     **opts) -> ExperimentResult:
    """DGSI-lite variants per day; deltas and change correlations against base."""
    variants = tuple(variants)
    if variants[0] != "base":
        variants = ("base",) + tuple(v for v in variants if v != "base")
    out = ExperimentResult()
    rows = []
    dep_runs = {v: [] for v in variants}
    mean_u = {v: [] for v in variants}
    for j, (day, ds) in enumerate(days.items()):
        split = _split(ds, opts, j)
        test = split.test
        W = holdout_weights(test, k)
        gi = _or_none(lambda: morans_i(test.target, W).I) if W is not None else None
        u = {}
        for v in variants:
            res = _run(ds, f"dgsi:{v}", split, opts, f"{day}/dgsi:{v}")
            files, _ = run_bundle(res, W, prefix=f"{day}/dgsi-{v}/")
            out.files.update(files)
            out.timing[f"{day}/dgsi:{v}"] = res.timing["total"]
            u[v] = res.uncertainty
            mean_u[v].append(float(np.mean(u[v])))
            if W is not None:
                dep_runs[v].append(DependenceRun(u[v], test.target, W, day))
        for v in variants[1:]:
            delta = u[v] - u["base"]
            corr = None
            if W is not None:
                ch = uncertainty_change_analysis(u["base"], u[v], test.target, W)
                corr = ch.correlation
            rows.append([day, v, np.nan if gi is None else gi, float(np.mean(delta)),
                         np.nan if corr is None else corr])
    out.files["changes.csv"] = csv_text(["day", "variant", "global_i", "mean_delta",
                                         "change_corr"], rows)
    summary = {}
    for v in variants:
        dep = dependence_analysis(dep_runs[v]) if len(dep_runs[v]) else None
        entry = {"mean_uncertainty": float(np.mean(mean_u[v])),
                 "dependence": dep.as_dict() if dep else None}
        if v != "base":
            r = np.array([row[2:] for row in rows if row[1] == v], dtype=float)
            hi = (r[:, 0] > high_i) & np.isfinite(r[:, 2])
            entry.update({
                "mean_delta": float(np.mean(r[:, 1])),
                "n_high_i_days": int(hi.sum()),
                "mean_change_corr_high_i": float(np.mean(r[hi, 2])) if hi.any() else None,
            })
        summary[v] = entry
    out.metrics = {"n_days": len(days), "high_i_threshold": high_i, "variants": summary}
    return out


def run_experiment(name: str, data, **opts) -> ExperimentResult:
    """Dispatch by experiment name; ``data`` is a dataset or ``{day: dataset}``."""
    if name not in EXPERIMENTS:
        raise GeoConformalError(f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
    days = data if isinstance(data, dict) else {"all": data}
    if name == "regression-features":
        if len(days) != 1:
            raise GeoConformalError("regression-features takes a single dataset")
        return regression_features(next(iter(days.values())), **opts)
    if name == "interpolation-compare":
        return interpolation_compare(days, **opts)
    return feature_variants(days, **opts)
