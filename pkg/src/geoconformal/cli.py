"""Command-line interface: ``geoconformal <command> [flags]``.

Settings resolve in three layers, later ones winning: built-in defaults,
a ``--config`` file of ``key = value`` lines (keys are flag names without
the leading dashes), then flags given on the command line. The resolved
configuration is validated in full before any data is read, and every
output file of a run is rendered before the first one is written.

Exit codes: 0 success, 1 a pipeline stage failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .conformal import KernelFamily, geocp_run
from .diagnostics import (bootstrap_intervals, build_spatial_weights, coverage_from_bounds,
                          local_morans_i, morans_i)
from .errors import GeoConformalError, StageError
from .experiments import (EXPERIMENTS, INTERPOLATORS, VARIANTS, params_for, run_bundle,
                          run_experiment)
from .geo import (CRS, ColumnMapping, SpatialDataset, parse_dataset, parse_grouped,
                  split_dataset)
from .predictors import PREDICTOR_SPECS, make_predictor
from .reports import (csv_text, geojson_text, json_text, summary_text, table_csv, write_files)
from .synth import (CovarianceKind, FieldSpec, NoiseProfile, SceneSpec, make_field_days,
                    make_field_scene, make_regression_scene, make_zoned_days)

COMMANDS = ("geocp", "bootstrap", "experiment", "synth", "moran")
SCENES = ("regression", "field", "days", "zoned-days")

DEFAULTS = {
    "data": None, "x_col": "x", "y_col": "y", "target_col": "target", "feature_cols": "",
    "crs": "planar", "group_col": None, "coords_as_features": False,
    "predictor": "gbt", "param": [], "kernel": "gaussian", "bandwidth": "median",
    "epsilon": 0.1, "split": "0.8/0.1/0.1", "conservative": False,
    "seed": 0, "threads": 1, "out": None, "config": None,
    "B": 2000, "k": 8, "weights": "knn", "radius": None,
    "scene": "regression", "n": 500, "n_days": 30, "sampling": "uniform",
    "noise": "constant", "noise_low": 1.0, "noise_high": 1.0,
    "field_kind": "exponential", "sill": 1.0, "range": 20.0, "nugget": 0.0, "mean": 0.0,
}

# which settings each command accepts (flags and config keys alike)
_COMMON = {"config", "out", "seed", "threads"}
_DATA = {"data", "x_col", "y_col", "target_col", "feature_cols", "crs"}
_MODEL = {"predictor", "param", "kernel", "bandwidth", "epsilon", "split"}
ACCEPTS = {
    "geocp": _COMMON | _DATA | _MODEL | {"coords_as_features", "conservative"},
    "bootstrap": _COMMON | _DATA | {"predictor", "param", "epsilon", "split",
                                    "coords_as_features", "B"},
    "experiment": _COMMON | _DATA | {"group_col", "param", "kernel", "bandwidth", "epsilon",
                                     "split", "k"},
    "synth": _COMMON | {"x_col", "y_col", "target_col", "scene", "n", "n_days", "sampling",
                        "noise", "noise_low", "noise_high", "field_kind", "sill", "range",
                        "nugget", "mean"},
    "moran": _COMMON | _DATA | {"weights", "k", "radius"},
}


class ConfigError(GeoConformalError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# --------------------------------------------------------------------------
# parser

def _add(p, dest, *flags, **kw):
    p.add_argument(*flags, dest=dest, default=argparse.SUPPRESS, **kw)


def _add_options(p, cmd):
    acc = ACCEPTS[cmd]
    g = p.add_argument_group("run")
    _add(g, "config", "--config", metavar="FILE",
         help="key = value file; flags given here override it")
    _add(g, "out", "--out", metavar="DIR", help="output directory (required)")
    _add(g, "seed", "--seed", type=int, help="random seed (default 0)")
    _add(g, "threads", "--threads", type=int,
         help="worker threads for quantiles and bootstrap replicates (default 1)")
    if "data" in acc:
        g = p.add_argument_group("data")
        _add(g, "data", "--data", metavar="CSV", help="input CSV with a header row")
    if "x_col" in acc:
        g = p.add_argument_group("columns")
        _add(g, "x_col", "--x-col", metavar="NAME", help="x / longitude column (default x)")
        _add(g, "y_col", "--y-col", metavar="NAME", help="y / latitude column (default y)")
        _add(g, "target_col", "--target-col", metavar="NAME",
             help="target column (default target)")
    if "feature_cols" in acc:
        _add(g, "feature_cols", "--feature-cols", metavar="A,B,...",
             help="comma-separated feature columns (default none)")
        _add(g, "crs", "--crs", choices=[c.value for c in CRS],
             help="planar (Euclidean) or latlon (haversine metres); default planar")
    if "group_col" in acc:
        _add(g, "group_col", "--group-col", metavar="NAME",
             help="column splitting the file into separate datasets, e.g. days")
    if "coords_as_features" in acc:
        _add(g, "coords_as_features", "--coords-as-features", action="store_true",
             help="append the coordinates to the feature columns")
    if "predictor" in acc or "param" in acc:
        g = p.add_argument_group("model")
    if "predictor" in acc:
        _add(g, "predictor", "--predictor", choices=PREDICTOR_SPECS,
             help="point predictor (default gbt)")
    if "param" in acc:
        _add(g, "param", "--param", action="append", metavar="KEY=VALUE",
             help="predictor hyperparameter, repeatable (e.g. n_trees=50)")
    if "kernel" in acc:
        _add(g, "kernel", "--kernel", choices=[k.value for k in KernelFamily],
             help="distance-decay kernel (default gaussian)")
        _add(g, "bandwidth", "--bandwidth", metavar="LEN|median",
             help="kernel bandwidth in CRS units (metres for latlon) or median "
                  "pairwise calibration distance (default median)")
    if "epsilon" in acc:
        _add(g, "epsilon", "--epsilon", type=float,
             help="miscoverage level in (0, 1); intervals target 1 - epsilon (default 0.1)")
        _add(g, "split", "--split", metavar="a/b/c",
             help="train/calibration/test fractions (default 0.8/0.1/0.1)")
    if "conservative" in acc:
        _add(g, "conservative", "--conservative", action="store_true",
             help="count a point mass at +inf in the quantile (finite-sample guarantee)")
    if "B" in acc:
        _add(g, "B", "--B", type=int, help="bootstrap replicates (default 2000)")
    if "k" in acc:
        g = p.add_argument_group("spatial weights")
        _add(g, "k", "--k", type=int, help="neighbours in KNN weights (default 8)")
    if "weights" in acc:
        _add(g, "weights", "--weights", choices=["knn", "band"],
             help="weights scheme (default knn)")
        _add(g, "radius", "--radius", type=float, help="distance band radius")
    if "scene" in acc:
        g = p.add_argument_group("scene")
        _add(g, "scene", "--scene", choices=SCENES, help="what to generate (default regression)")
        _add(g, "n", "--n", type=int, help="points per scene or per day (default 500)")
        _add(g, "n_days", "--n-days", type=int, help="days for days/zoned-days (default 30)")
        _add(g, "sampling", "--sampling", choices=["uniform", "clustered"],
             help="point layout for regression scenes (default uniform)")
        _add(g, "noise", "--noise", choices=["constant", "ramp", "two_region"],
             help="noise sd profile for regression scenes (default constant)")
        _add(g, "noise_low", "--noise-low", type=float, help="west / low noise sd (default 1)")
        _add(g, "noise_high", "--noise-high", type=float,
             help="east / high noise sd (default 1)")
        _add(g, "field_kind", "--field-kind", choices=[c.value for c in CovarianceKind],
             help="covariance of field scenes (default exponential)")
        _add(g, "sill", "--sill", type=float, help="field sill (default 1)")
        _add(g, "range", "--range", type=float, help="field range (default 20)")
        _add(g, "nugget", "--nugget", type=float, help="field nugget (default 0)")
        _add(g, "mean", "--mean", type=float, help="field mean (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoconformal",
                     description="Geographically weighted conformal prediction intervals.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    helps = {
        "geocp": "GeoCP intervals for the test split",
        "bootstrap": "bootstrap percentile intervals for the test split",
        "experiment": "multi-run experiment bundle",
        "synth": "write a synthetic dataset CSV",
        "moran": "global and local Moran's I of the target column",
    }
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=helps[cmd], description=helps[cmd])
        if cmd == "experiment":
            p.add_argument("name", nargs="?", default=argparse.SUPPRESS,
                           choices=EXPERIMENTS, help="experiment to run")
        _add_options(p, cmd)
    return parser


def _subparser(parser, cmd) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[cmd]
    raise KeyError(cmd)


# --------------------------------------------------------------------------
# configuration

def read_config_file(path, cmd: str, sub: argparse.ArgumentParser) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            dest = key.replace("-", "_")
            if dest not in ACCEPTS[cmd] or dest == "config":
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for {cmd}")
            flag = "--" + key.replace("_", "-")
            if dest in ("coords_as_features", "conservative"):
                if value.lower() in ("1", "true", "yes", "on"):
                    tokens.append(flag)
                elif value.lower() not in ("0", "false", "no", "off"):
                    raise ConfigError(f"{path}:{lineno}: {key} expects true or false")
            elif dest == "param":
                for item in filter(None, (s.strip() for s in value.split(","))):
                    tokens += [flag, item]
            else:
                tokens += [flag, value]
    try:
        return vars(sub.parse_args(tokens))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_value(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(s.lower(), s)


def parse_params(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = _parse_value(v)
    return out


def parse_split(text) -> tuple:
    try:
        parts = tuple(float(s) for s in str(text).split("/"))
    except ValueError:
        raise ConfigError(f"--split expects a/b/c fractions, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or parts[1] <= 0 or parts[2] <= 0 \
            or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigError(f"--split fractions must be three non-negative numbers summing "
                          f"to 1 with non-empty calibration and test parts, got {text!r}")
    return parts


def resolve_config(argv) -> dict:
    """Defaults, then config file, then flags; validated, nothing read yet."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    cmd = ns.pop("command", None)
    if cmd is None:
        raise ConfigError("a command is required: " + " | ".join(COMMANDS))
    cfg = {k: v for k, v in DEFAULTS.items() if k in ACCEPTS[cmd]}
    if "config" in ns:
        cfg.update(read_config_file(ns["config"], cmd, _subparser(parser, cmd)))
    cfg.update(ns)
    cfg["command"] = cmd
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    cmd = cfg["command"]
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    if os.path.exists(cfg["out"]) and not os.path.isdir(cfg["out"]):
        raise ConfigError(f"--out exists and is not a directory: {cfg['out']}")
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be >= 1")
    if "data" in cfg:
        if not cfg["data"]:
            raise ConfigError("--data is required")
        if not os.path.isfile(cfg["data"]):
            raise ConfigError(f"--data file not found: {cfg['data']}")
        cfg["feature_cols"] = [c.strip() for c in str(cfg["feature_cols"]).split(",")
                               if c.strip()]
        cols = [cfg["x_col"], cfg["y_col"], cfg["target_col"], *cfg["feature_cols"]]
        if cfg.get("group_col"):
            cols.append(cfg["group_col"])
        if len(set(cols)) != len(cols):
            raise ConfigError(f"column names must be distinct: {', '.join(cols)}")
    if "epsilon" in cfg and not 0.0 < cfg["epsilon"] < 1.0:
        raise ConfigError(f"--epsilon must lie in (0, 1), got {cfg['epsilon']}")
    if "split" in cfg:
        cfg["split"] = "/".join(repr(f) for f in parse_split(cfg["split"]))
    if "bandwidth" in cfg:
        bw = str(cfg["bandwidth"]).strip().lower()
        if bw != "median":
            try:
                val = float(bw)
            except ValueError:
                raise ConfigError(f"--bandwidth must be a length or 'median', got {bw!r}") from None
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(f"--bandwidth must be positive, got {bw!r}")
            cfg["bandwidth"] = val
        else:
            cfg["bandwidth"] = "median"
    if "param" in cfg:
        cfg["param"] = list(cfg["param"])
        params = parse_params(cfg["param"])
        specs = [cfg["predictor"]] if "predictor" in cfg else _experiment_models(cfg)
        for key in params:
            if not any(key in make_predictor(spec).get_params() for spec in specs):
                raise ConfigError(f"--param {key} is not a parameter of {', '.join(specs)}")
        for spec in specs:
            try:
                make_predictor(spec, **params_for(spec, params))
            except (TypeError, GeoConformalError) as exc:
                raise ConfigError(f"invalid --param for {spec}: {exc}") from None
    if cmd == "experiment" and "name" not in cfg:
        raise ConfigError("experiment needs a name: " + " | ".join(EXPERIMENTS))
    if "B" in cfg and cfg["B"] < 2:
        raise ConfigError("--B must be >= 2")
    if "k" in cfg and cfg["k"] < 1:
        raise ConfigError("--k must be >= 1")
    if cmd == "moran" and cfg["weights"] == "band" and not (cfg["radius"] or 0) > 0:
        raise ConfigError("--weights band needs a positive --radius")
    if cmd == "synth":
        if cfg["n"] < 10:
            raise ConfigError("--n must be >= 10")
        if cfg["n_days"] < 1:
            raise ConfigError("--n-days must be >= 1")
        if min(cfg["noise_low"], cfg["noise_high"], cfg["sill"], cfg["nugget"]) < 0 \
                or not cfg["range"] > 0:
            raise ConfigError("noise, sill and nugget must be >= 0 and range > 0")


def _experiment_models(cfg):
    name = cfg.get("name")
    if name == "regression-features":
        return ["gbt"]
    if name == "interpolation-compare":
        return list(INTERPOLATORS)
    return [f"dgsi:{v}" for v in VARIANTS]


def _echo(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(cfg)}


# --------------------------------------------------------------------------
# commands

def _schema(cfg) -> ColumnMapping:
    return ColumnMapping(cfg["x_col"], cfg["y_col"], cfg["target_col"],
                         tuple(cfg["feature_cols"]), cfg["crs"])


def _load(cfg) -> SpatialDataset:
    try:
        ds = parse_dataset(cfg["data"], _schema(cfg))
        if cfg.get("coords_as_features"):
            ds = ds.with_coords_as_features()
        return ds
    except GeoConformalError as exc:
        raise StageError("load", exc) from exc


def _fractions(cfg):
    return parse_split(cfg["split"])


def cmd_geocp(cfg) -> dict:
    ds = _load(cfg)
    res = geocp_run(ds, cfg["predictor"], cfg["kernel"], cfg["bandwidth"], cfg["epsilon"],
                    _fractions(cfg), cfg["seed"], cfg["conservative"], cfg["threads"],
                    parse_params(cfg["param"]))
    files, metrics = run_bundle(res)
    files["summary.json"] = summary_text(_echo(cfg), metrics, res.timing)
    return files


def cmd_bootstrap(cfg) -> dict:
    ds = _load(cfg)
    try:
        split = split_dataset(ds, _fractions(cfg), cfg["seed"])
    except GeoConformalError as exc:
        raise StageError("split", exc) from exc
    pool = ds.subset(np.concatenate([split.train_idx, split.calib_idx]))
    test = split.test
    try:
        rep = bootstrap_intervals(pool, test, cfg["B"], cfg["predictor"], cfg["epsilon"],
                                  cfg["seed"], cfg["threads"], parse_params(cfg["param"]))
    except GeoConformalError as exc:
        raise StageError("bootstrap", exc) from exc
    center = rep.predictions.mean(axis=0)
    length = rep.upper - rep.lower
    cov = coverage_from_bounds(rep.lower, rep.upper, test.target, cfg["epsilon"])
    W = build_spatial_weights(test, "knn", k=min(8, len(test) - 1)) if len(test) >= 3 else None
    local_i = None
    if W is not None:
        try:
            local_i = local_morans_i(length, W)
        except GeoConformalError:
            pass
    files = {
        "intervals.csv": table_csv({"x": test.coords[:, 0], "y": test.coords[:, 1],
                                    "y_true": test.target, "y_pred": center,
                                    "lower": rep.lower, "upper": rep.upper, "length": length}),
        "coverage.json": json_text(cov.as_dict()),
        "bootstrap.json": json_text(rep.as_dict()),
        "uncertainty.geojson": geojson_text(test.coords, {"uncertainty": length,
                                                          "local_i": local_i}),
    }
    files["summary.json"] = summary_text(
        _echo(cfg), {"coverage": cov.as_dict(), "bootstrap": rep.as_dict(),
                     "n_resampled": len(pool), "n_test": len(test)},
        {"total": rep.wall_time})
    return files


def cmd_experiment(cfg) -> dict:
    t0 = time.perf_counter()
    try:
        if cfg.get("group_col"):
            data = parse_grouped(cfg["data"], _schema(cfg), cfg["group_col"])
        else:
            data = parse_dataset(cfg["data"], _schema(cfg))
    except GeoConformalError as exc:
        raise StageError("load", exc) from exc
    opts = {"kernel": cfg["kernel"], "bandwidth": cfg["bandwidth"], "level": cfg["epsilon"],
            "fractions": _fractions(cfg), "seed": cfg["seed"], "threads": cfg["threads"],
            "predictor_params": parse_params(cfg["param"]) or None, "k": cfg["k"]}
    if cfg["name"] == "regression-features":
        opts.pop("k")
    try:
        res = run_experiment(cfg["name"], data, **opts)
    except StageError:
        raise
    except GeoConformalError as exc:
        raise StageError("experiment", exc) from exc
    files = dict(res.files)
    timing = {**res.timing, "total": time.perf_counter() - t0}
    files["summary.json"] = summary_text(_echo(cfg), res.metrics, timing)
    return files


def cmd_synth(cfg) -> dict:
    t0 = time.perf_counter()
    cols = [cfg["x_col"], cfg["y_col"], cfg["target_col"]]
    scene, n, seed = cfg["scene"], cfg["n"], cfg["seed"]
    if scene == "regression":
        noise = NoiseProfile(cfg["noise"], cfg["noise_low"], cfg["noise_high"])
        ds, _ = make_regression_scene(SceneSpec(n=n, sampling=cfg["sampling"], noise=noise,
                                                seed=seed))
        days = {None: ds}
    elif scene == "field":
        spec = FieldSpec(cfg["field_kind"], cfg["sill"], cfg["range"], cfg["nugget"],
                         cfg["mean"])
        days = {None: make_field_scene(n, spec, seed=seed)}
    elif scene == "days":
        days = {f"day{j:03d}": d for j, d in
                enumerate(make_field_days(cfg["n_days"], n, seed, kind=cfg["field_kind"]))}
    else:
        days = {f"day{j:03d}": d for j, d in
                enumerate(make_zoned_days(cfg["n_days"], n, seed))}
    rows = []
    for day, d in days.items():
        for i in range(len(d)):
            row = [float(d.coords[i, 0]), float(d.coords[i, 1]), float(d.target[i]),
                   *map(float, d.features[i])]
            rows.append(row if day is None else [*row, day])
    first = next(iter(days.values()))
    header = cols + list(first.feature_names) + ([] if None in days else ["day"])
    files = {"data.csv": csv_text(header, rows)}
    files["summary.json"] = summary_text(_echo(cfg), {"n_rows": len(rows), "n_datasets": len(days)},
                                         {"total": time.perf_counter() - t0})
    return files


def cmd_moran(cfg) -> dict:
    t0 = time.perf_counter()
    ds = _load(cfg)
    try:
        W = build_spatial_weights(ds, cfg["weights"], k=cfg["k"], radius=cfg["radius"])
        res = morans_i(ds.target, W)
        local = local_morans_i(ds.target, W)
    except GeoConformalError as exc:
        raise StageError("moran", exc) from exc
    files = {
        "local_moran.csv": table_csv({"x": ds.coords[:, 0], "y": ds.coords[:, 1],
                                      "value": ds.target, "local_i": local}),
        "moran.json": json_text({**res.as_dict(), "scheme": W.scheme,
                                 "n_isolated": len(W.isolated)}),
        "local_moran.geojson": geojson_text(ds.coords, {"value": ds.target, "local_i": local}),
    }
    files["summary.json"] = summary_text(_echo(cfg), {"moran": res.as_dict(),
                                                      "scheme": W.scheme},
                                         {"total": time.perf_counter() - t0})
    return files


HANDLERS = {"geocp": cmd_geocp, "bootstrap": cmd_bootstrap, "experiment": cmd_experiment,
            "synth": cmd_synth, "moran": cmd_moran}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"geoconformal: error [config]: {exc}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            files = HANDLERS[cfg["command"]](cfg)
        write_files(cfg["out"], files)
    except StageError as exc:
        print(f"geoconformal: error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except GeoConformalError as exc:
        print(f"geoconformal: error [run]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"geoconformal: error [write]: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(files)} file(s) to {cfg['out']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
