import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoconformal.errors import CRSMismatchError, FitError, GeoConformalError, SchemaError
from geoconformal.geo import Location, SpatialDataset, SpatialRecord
from geoconformal.predictors import (DgsiLiteModel, EmpiricalVariogram, GbtModel, KnnModel,
                                     KrigingModel, VariogramModel, build_tree, dumps_model,
                                     empirical_semivariogram, fit_kriging, fit_variogram,
                                     kriging_weights, load_model, loads_model, make_predictor,
                                     ok_predict, predict_batch, save_model, train_dgsi_lite,
                                     train_gbt)
from geoconformal.predictors.base import PREDICTOR_SPECS


def field_ds(n=40, seed=0, fn=None, p=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 10, (n, 2))
    z = fn(xy) if fn else np.sin(xy[:, 0]) + 0.5 * xy[:, 1]
    return SpatialDataset(xy, rng.normal(size=(n, p)), z, tuple(f"f{i}" for i in range(p)))


def queries(n, seed=1, p=0):
    rng = np.random.default_rng(seed)
    return SpatialDataset(rng.uniform(0, 10, (n, 2)), rng.normal(size=(n, p)),
                          np.full(n, np.nan), tuple(f"f{i}" for i in range(p)))


# --------------------------------------------------------------------------
# variograms

class TestSemivariogram:
    def test_constant_field(self):
        emp = empirical_semivariogram(field_ds(fn=lambda xy: np.full(len(xy), 3.0)))
        assert np.all(emp.gamma == 0)

    def test_two_points(self):
        ds = SpatialDataset([[0, 0], [1, 0]], np.zeros((2, 0)), [0.0, 2.0])
        emp = empirical_semivariogram(ds, n_bins=1, max_lag=2.0)
        assert emp.gamma.tolist() == [2.0] and emp.counts.tolist() == [1.0]

    def test_white_noise(self):
        rng = np.random.default_rng(0)
        n = 600
        ds = SpatialDataset(rng.uniform(0, 100, (n, 2)), np.zeros((n, 0)),
                            rng.normal(0, 2.0, n))
        emp = empirical_semivariogram(ds, n_bins=8)
        assert np.all(emp.counts >= 200)
        assert np.all(np.abs(emp.gamma / 4.0 - 1) < 0.2)

    @given(st.integers(2, 40), st.integers(1, 12), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_bins_invariants(self, n, n_bins, seed):
        ds = field_ds(n, seed)
        emp = empirical_semivariogram(ds, n_bins)
        assert np.all(np.diff(emp.lags) > 0) and np.all(emp.gamma >= 0)
        assert np.all(emp.counts >= 1)
        d = np.hypot(*(ds.coords[:, None, :] - ds.coords[None, :, :]).transpose(2, 0, 1))
        within = np.count_nonzero(d[np.triu_indices(n, 1)] <= emp.max_lag)
        assert emp.counts.sum() == within

    def test_errors(self):
        with pytest.raises(GeoConformalError):
            empirical_semivariogram(field_ds(1))


def _bins(model, max_lag=1500.0, n=15):
    lags = np.linspace(max_lag / (2 * n), max_lag - max_lag / (2 * n), n)
    return EmpiricalVariogram(lags, model(lags), np.full(n, 100.0), max_lag)


class TestVariogramFit:
    def test_exponential_recovery(self):
        true = VariogramModel("exponential", nugget=0.1, psill=1.0, range=500.0)
        fit = fit_variogram(_bins(true), "exponential")
        assert fit.nugget == pytest.approx(0.1, rel=0.05)
        assert fit.psill == pytest.approx(1.0, rel=0.05)
        assert fit.range == pytest.approx(500.0, rel=0.05)

    def test_gaussian_recovery(self):
        true = VariogramModel("gaussian", nugget=0.2, psill=2.0, range=400.0)
        fit = fit_variogram(_bins(true), "gaussian")
        for k in ("nugget", "psill", "range"):
            assert getattr(fit, k) == pytest.approx(getattr(true, k), rel=0.05)

    def test_linear_closed_form(self):
        emp = _bins(VariogramModel("linear", slope=2.0), max_lag=10.0)
        fit = fit_variogram(emp, "linear")
        assert fit.slope == pytest.approx(2.0, abs=1e-6) and fit.nugget == pytest.approx(0, abs=1e-6)

    @pytest.mark.parametrize("kind", ["exponential", "gaussian", "linear"])
    def test_all_zero(self, kind):
        emp = EmpiricalVariogram(np.arange(1.0, 6.0), np.zeros(5), np.ones(5), 5.0)
        fit = fit_variogram(emp, kind)
        assert fit.nugget == 0 and fit.psill == 0 and fit.slope == 0

    @given(st.floats(0, 1), st.floats(0.1, 5), st.floats(10, 2000),
           st.sampled_from(["exponential", "gaussian"]))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, c0, c1, a, kind):
        emp = _bins(VariogramModel(kind, c0, c1, a))
        fit = fit_variogram(emp, kind)
        assert fit.nugget >= 0 and fit.psill >= 0 and 0 < fit.range <= 3 * emp.max_lag
        assert np.all(np.diff(fit(np.linspace(0, 3000, 50))) >= -1e-12)

    def test_too_few_bins(self):
        emp = EmpiricalVariogram(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.ones(2), 3.0)
        with pytest.raises(FitError):
            fit_variogram(emp, "exponential")

    def test_gamma_at_zero_is_nugget(self):
        assert VariogramModel("exponential", 0.3, 1.0, 5.0)(0.0) == 0.3


# --------------------------------------------------------------------------
# kriging

VARIO = VariogramModel("exponential", nugget=0.0, psill=1.0, range=3.0)


class TestKriging:
    def test_exactness(self):
        ds = field_ds(30)
        m = fit_kriging(ds, VARIO)
        v, s = m.predict_with_variance(ds)
        assert np.max(np.abs(v - ds.target)) < 1e-8
        assert np.max(s) < 1e-8

    def test_symmetry(self):
        ds = SpatialDataset([[-1, 0], [1, 0]], np.zeros((2, 0)), [1.0, 3.0])
        val, var = ok_predict(fit_kriging(ds, VARIO), Location(0, 5))
        assert val == pytest.approx(2.0, abs=1e-12) and var >= 0

    @pytest.mark.parametrize("n", [3, 4, 7, 10])
    @pytest.mark.parametrize("kind", ["exponential", "gaussian", "linear"])
    def test_dense_oracle(self, n, kind):
        rng = np.random.default_rng(n)
        ds = SpatialDataset(rng.uniform(0, 5, (n, 2)), np.zeros((n, 0)), rng.normal(size=n))
        vario = VariogramModel(kind, nugget=0.05, psill=1.0, range=2.0, slope=0.7)
        m = fit_kriging(ds, vario)
        q = rng.uniform(0, 5, 2)
        val, var = ok_predict(m, Location(*q))
        # direct bordered system, solved densely
        d = np.sqrt(((ds.coords[:, None] - ds.coords[None]) ** 2).sum(-1))
        sill = vario.sill(d.max())
        G = np.where(d == 0, 0.0, vario(d)) + 1e-10 * sill * np.eye(n)
        A = np.block([[G, np.ones((n, 1))], [np.ones((1, n)), np.zeros((1, 1))]])
        g0 = vario(np.sqrt(((ds.coords - q) ** 2).sum(-1)))
        sol = np.linalg.solve(A, np.append(g0, 1.0))
        assert val == pytest.approx(sol[:n] @ ds.target, abs=1e-9)
        assert var == pytest.approx(max(sol[:n] @ g0 + sol[n], 0.0), abs=1e-9)

    def test_weights_sum_to_one(self):
        ds = field_ds(50)
        m = KrigingModel("exponential").fit(ds)
        w = kriging_weights(m, queries(500))
        assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-9

    def test_variance_nonnegative(self):
        m = KrigingModel("gaussian").fit(field_ds(40))
        _, s = m.predict_with_variance(queries(100))
        assert np.all(s >= 0)

    def test_constant_field(self):
        ds = field_ds(20, fn=lambda xy: np.full(len(xy), 4.0))
        m = KrigingModel("exponential").fit(ds)
        assert np.allclose(m.predict(queries(10)), 4.0)

    def test_crs_mismatch(self):
        m = KrigingModel().fit(field_ds(10))
        with pytest.raises(CRSMismatchError):
            ok_predict(m, Location(1, 1, "latlon"))

    def test_too_few_points(self):
        with pytest.raises(FitError):
            KrigingModel().fit(field_ds(1))


# --------------------------------------------------------------------------
# DGSI-lite

class TestDgsi:
    @pytest.mark.parametrize("variant", ["base", "local", "loc"])
    def test_constant_field(self, variant):
        ds = field_ds(30, fn=lambda xy: np.full(len(xy), 2.5))
        m = train_dgsi_lite(ds, variant, epochs=20)
        assert np.all(m.predict(queries(25)) == 2.5)

    def test_k1_nearest(self):
        ds = field_ds(30)
        m = DgsiLiteModel(k=1, epochs=5).fit(ds)
        q = queries(20)
        d = ((q.coords[:, None] - ds.coords[None]) ** 2).sum(-1)
        assert np.array_equal(m.predict(q), ds.target[np.argmin(d, axis=1)])

    @pytest.mark.parametrize("variant", ["base", "local", "loc"])
    def test_loss_decreases(self, variant):
        ds = field_ds(80, fn=lambda xy: 2 * xy[:, 0] - xy[:, 1])
        m = train_dgsi_lite(ds, variant, epochs=200)
        assert len(m.loss_history) == 201
        assert m.loss_history[-1] < m.loss_history[0]

    @given(st.integers(0, 500), st.integers(1, 8), st.sampled_from(["base", "local", "loc"]))
    @settings(max_examples=20, deadline=None)
    def test_softmax_and_hull(self, seed, k, variant):
        ds = field_ds(30, seed)
        m = DgsiLiteModel(variant, k=k, epochs=10, seed=seed).fit(ds)
        q = queries(15, seed + 1)
        idx, w = m.neighbor_weights(q)
        assert np.all(w >= 0) and np.max(np.abs(w.sum(axis=1) - 1)) < 1e-9
        pred = m.predict(q)
        nz = ds.target[idx]
        assert np.all(pred >= nz.min(axis=1) - 1e-12) and np.all(pred <= nz.max(axis=1) + 1e-12)

    def test_gradient_matches_finite_differences(self):
        m = DgsiLiteModel("local", k=4, hidden=5, epochs=0).fit(field_ds(20))
        X, idx = m._inputs(m.coords, exclude_self=True)
        zn = (m.z[idx] - m.z_mean) / m.z_scale
        y = (m.z - m.z_mean) / m.z_scale
        p = m._init_params()
        rng = np.random.default_rng(0)
        p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
        _, g = DgsiLiteModel.loss_and_grad(p, X, zn, y)
        h = 1e-6
        for name in p:
            flat = p[name].reshape(-1)
            for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + h
                lp, _ = DgsiLiteModel.loss_and_grad(p, X, zn, y)
                flat[j] = old - h
                lm, _ = DgsiLiteModel.loss_and_grad(p, X, zn, y)
                flat[j] = old
                assert g[name].reshape(-1)[j] == pytest.approx((lp - lm) / (2 * h), abs=1e-7)

    def test_deterministic(self):
        ds = field_ds(40)
        a = train_dgsi_lite(ds, "loc", seed=3, epochs=30).predict(queries(10))
        b = train_dgsi_lite(ds, "loc", seed=3, epochs=30).predict(queries(10))
        assert np.array_equal(a, b)

    def test_variants_start_from_base(self):
        ds = field_ds(40)
        base = DgsiLiteModel("base", epochs=0).fit(ds)
        for v in ("local", "loc"):
            m = DgsiLiteModel(v, epochs=0).fit(ds)
            assert m.loss_history[0] == pytest.approx(base.loss_history[0], rel=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_errors(self):
        with pytest.raises(FitError):
            DgsiLiteModel(k=6).fit(field_ds(6))
        with pytest.raises(FitError, match="epoch"):
            DgsiLiteModel(learning_rate=float("inf"), epochs=3).fit(field_ds(20))


# --------------------------------------------------------------------------
# GBT

class TestGbt:
    def test_depth0_is_mean(self):
        ds = field_ds(30, p=2)
        m = train_gbt(ds, n_trees=1, max_depth=0, learning_rate=1.0)
        assert np.allclose(m.predict(queries(10, p=2)), ds.target.mean(), atol=1e-12)

    def test_constant_target(self):
        ds = field_ds(30, p=2, fn=lambda xy: np.full(len(xy), -1.5))
        assert np.allclose(train_gbt(ds, n_trees=10).predict(queries(10, p=2)), -1.5)

    def test_step(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 100)
        ds = SpatialDataset(rng.uniform(0, 1, (100, 2)), x[:, None], (x > 0).astype(float), ("x",))
        m = train_gbt(ds, n_trees=1, max_depth=1, learning_rate=1.0, min_samples=1)
        assert m.train_rmse_ < 0.01

    def test_rmse_nonincreasing(self):
        ds = field_ds(120, p=3, fn=lambda xy: xy[:, 0] ** 2)
        m = GbtModel(n_trees=40, use_coords=True).fit(ds)
        r = [np.sqrt(np.mean((p - ds.target) ** 2)) for p in m.staged_predict(ds)]
        assert np.all(np.diff(r) <= 1e-12)

    def test_tie_break_lowest_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
        tree = build_tree(X, np.array([0.0, 1.0, 0.0, 1.0]), max_depth=1)
        assert tree.feature[0] == 0 and tree.threshold[0] == 0.5

    def test_leaf_per_tree(self):
        ds = field_ds(60, p=2)
        m = train_gbt(ds, n_trees=5)
        X = np.asarray(queries(20, p=2).features)
        for t in m.trees:
            leaves = t.apply(X)
            assert leaves.shape == (20,) and np.all(t.feature[leaves] == -1)

    def test_schema_mismatch(self):
        m = train_gbt(field_ds(30, p=2), n_trees=2)
        with pytest.raises(SchemaError):
            m.predict(queries(3, p=1))


# --------------------------------------------------------------------------
# contract

class TestContract:
    def test_predict_batch(self):
        m = KnnModel(k=3).fit(field_ds(30))
        q = queries(12)
        assert predict_batch(m, []).shape == (0,)
        full = predict_batch(m, q)
        assert predict_batch(m, [q.location(4)])[0] == full[4]
        perm = np.random.default_rng(0).permutation(12)
        assert np.array_equal(predict_batch(m, q.subset(perm)), full[perm])
        recs = [SpatialRecord(q.location(i)) for i in range(3)]
        assert np.array_equal(predict_batch(m, recs), full[:3])

    def test_knn_exact_at_data(self):
        ds = field_ds(20)
        assert np.allclose(KnnModel().fit(ds).predict(ds), ds.target)

    @pytest.mark.parametrize("spec", PREDICTOR_SPECS)
    def test_save_load_roundtrip(self, spec, tmp_path):
        ds = field_ds(40, p=2)
        params = {"epochs": 10} if spec.startswith("dgsi") else \
            {"n_trees": 5} if spec == "gbt" else {}
        m = make_predictor(spec, **params).fit(ds)
        path = tmp_path / "m.txt"
        save_model(m, path)
        back = load_model(path)
        q = queries(15, p=2)
        assert np.array_equal(back.predict(q), m.predict(q))
        assert dumps_model(back) == dumps_model(m)
        assert path.read_text().startswith("geoconformal-model 1\n")

    def test_load_rejects_garbage(self):
        with pytest.raises(GeoConformalError):
            loads_model("not a model")

    def test_unknown_spec(self):
        with pytest.raises(GeoConformalError):
            make_predictor("forest")

    def test_unfitted_and_nan_targets(self):
        with pytest.raises(GeoConformalError):
            KnnModel().predict(queries(2))
        with pytest.raises(FitError):
            KnnModel().fit(queries(5))
