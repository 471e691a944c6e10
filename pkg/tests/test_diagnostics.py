import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoconformal.conformal import CoverageLevel, GeoInterval
from geoconformal.diagnostics import (DependenceRun, bootstrap_error_percentiles,
                                      bootstrap_intervals, build_spatial_weights,
                                      coverage_from_bounds, coverage_ratio, dependence_analysis,
                                      local_morans_i, morans_i, pearson_corr, rmse,
                                      uncertainty_change_analysis)
from geoconformal.errors import GeoConformalError, GeoConformalWarning
from geoconformal.geo import SpatialDataset

from oracles import morans_i_oracle

LVL = CoverageLevel(0.1)


def grid(n):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    return np.column_stack([xs.ravel(), ys.ravel()])


def rand_coords(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 100, (n, 2))


class TestCoverage:
    def test_all_and_none(self):
        truth = np.array([1.0, 2.0, 3.0])
        full = [GeoInterval(t, 10.0, LVL) for t in truth]
        assert coverage_ratio(full, truth).coverage == 1.0
        wrong = [GeoInterval(t + 1, 0.0, LVL) for t in truth]
        assert coverage_ratio(wrong, truth).coverage == 0.0

    def test_closed_interval(self):
        rep = coverage_ratio([GeoInterval(0.0, 1.0, LVL)] * 2, [1.0, -1.0])
        assert rep.n_covered == 2 and rep.mean_length == 2.0 and rep.median_length == 2.0

    def test_mismatch(self):
        with pytest.raises(GeoConformalError):
            coverage_ratio([GeoInterval(0, 1, LVL)], [1.0, 2.0])

    @given(st.integers(1, 50), st.integers(0, 1000))
    def test_permutation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        c, h, t = rng.normal(size=n), rng.uniform(0, 1, n), rng.normal(size=n)
        p = rng.permutation(n)
        a = coverage_from_bounds(c - h, c + h, t)
        b = coverage_from_bounds((c - h)[p], (c + h)[p], t[p])
        assert a.coverage == b.coverage == a.n_covered / n


class TestRmse:
    def test_examples(self):
        assert rmse([1, 2], [1, 2]) == 0.0
        assert rmse(np.arange(5.0) + 3, np.arange(5.0)) == 3.0

    @given(st.integers(1, 40), st.integers(0, 1000))
    def test_formula_and_triangle(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, n))
        assert rmse(a, b) == pytest.approx(np.sqrt(np.sum((a - b) ** 2) / n), abs=1e-12)
        assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12

    def test_errors(self):
        with pytest.raises(GeoConformalError):
            rmse([], [])
        with pytest.raises(GeoConformalError):
            rmse([1.0], [1.0, 2.0])


class TestPearson:
    def test_examples(self):
        a = np.array([1.0, 3.0, 2.0, 5.0])
        assert pearson_corr(a, a) == pytest.approx(1.0)
        assert pearson_corr(a, -a) == pytest.approx(-1.0)
        with pytest.raises(GeoConformalError):
            pearson_corr(a, np.ones(4))

    @given(st.integers(3, 60), st.integers(0, 1000))
    def test_covariance_formula(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, n))
        cov = np.cov(a, b)
        assert pearson_corr(a, b) == pytest.approx(cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]),
                                                   abs=1e-12)


class TestWeights:
    def test_two_points(self):
        W = build_spatial_weights(np.array([[0.0, 0.0], [1.0, 1.0]]), k=1)
        assert W.dense().tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_grid_band_rook(self):
        W = build_spatial_weights(grid(5), "band", radius=1.01)
        counts = np.diff(W.matrix.indptr)
        interior = [i for i, (x, y) in enumerate(grid(5)) if 0 < x < 4 and 0 < y < 4]
        assert np.all(counts[interior] == 4)
        assert W.neighbors(6) == [(1, 0.25), (5, 0.25), (7, 0.25), (11, 0.25)]

    @given(st.integers(3, 60), st.integers(0, 1000), st.integers(1, 8))
    @settings(max_examples=40)
    def test_rows_sum_to_one(self, n, seed, k):
        W = build_spatial_weights(rand_coords(n, seed), k=min(k, n - 1))
        D = W.dense()
        assert np.allclose(D.sum(axis=1), 1.0) and np.all(np.diag(D) == 0)

    def test_isolated_flagged(self):
        with pytest.warns(GeoConformalWarning):
            W = build_spatial_weights(np.array([[0.0, 0], [1, 0], [50, 50]]), "band", radius=2)
        assert W.isolated.tolist() == [2] and W.dense()[2].sum() == 0

    def test_errors(self):
        with pytest.raises(GeoConformalError):
            build_spatial_weights(rand_coords(5), k=5)
        with pytest.raises(GeoConformalError):
            build_spatial_weights(rand_coords(1))


def checkerboard():
    xy = grid(4)
    z = (xy[:, 0] + xy[:, 1]) % 2
    return xy, z, build_spatial_weights(xy, "band", radius=1.01)


class TestMoran:
    def test_checkerboard(self):
        xy, z, W = checkerboard()
        assert morans_i(z, W).I == pytest.approx(-1.0, abs=1e-9)
        assert morans_i_oracle(z.tolist(), W.dense().tolist()) == pytest.approx(-1.0, abs=1e-12)
        assert np.all(local_morans_i(z, W) < 0)

    def test_constant(self):
        _, _, W = checkerboard()
        with pytest.raises(GeoConformalError, match="zero variance"):
            morans_i(np.full(16, 2.0), W)

    def test_iid_null(self):
        n = 900
        rng = np.random.default_rng(4)
        W = build_spatial_weights(rand_coords(n, 4), k=8)
        res = morans_i(rng.normal(size=n), W)
        assert res.expected_I == pytest.approx(-1 / (n - 1))
        assert abs(res.I - res.expected_I) < 3 * np.sqrt(res.variance)
        # permutation null agrees with the analytical variance in scale
        perm = [morans_i(rng.permutation(rng.normal(size=n)), W).I for _ in range(200)]
        assert np.std(perm) == pytest.approx(np.sqrt(res.variance), rel=0.25)

    @given(st.integers(4, 40), st.integers(0, 10_000), st.integers(1, 6))
    @settings(max_examples=100)
    def test_local_global_identity_and_oracle(self, n, seed, k):
        rng = np.random.default_rng(seed)
        W = build_spatial_weights(rand_coords(n, seed), k=min(k, n - 1))
        z = rng.normal(size=n)
        g = morans_i(z, W).I
        assert np.mean(local_morans_i(z, W)) == pytest.approx(g, abs=1e-9)
        assert g == pytest.approx(morans_i_oracle(z.tolist(), W.dense().tolist()), abs=1e-9)
        assert abs(g) <= 1.5

    @given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.floats(-1e3, 1e3),
           st.integers(0, 1000))
    def test_affine_invariance(self, a, c, seed):
        rng = np.random.default_rng(seed)
        W = build_spatial_weights(rand_coords(30, seed), k=4)
        z = rng.normal(size=30)
        assert morans_i(a * z + c, W).I == pytest.approx(morans_i(z, W).I, abs=1e-9)


class TestDependence:
    def runs(self, n_runs=5, n=90, fn=None):
        out = []
        for r in range(n_runs):
            rng = np.random.default_rng(r)
            xy = rand_coords(n, r)
            vals = xy[:, 0] * (r + 1) * 0.05 + rng.normal(size=n)
            W = build_spatial_weights(xy, k=8)
            u = fn(vals, W, rng) if fn else rng.uniform(1, 2, n)
            out.append(DependenceRun(u, vals, W, f"r{r}"))
        return out

    def test_uncertainty_is_local_i(self):
        rep = dependence_analysis(self.runs(fn=lambda v, W, rng: local_morans_i(v, W)))
        assert np.allclose(rep.inner_corr, 1.0)

    def test_independent(self):
        rep = dependence_analysis(self.runs(n_runs=10))
        assert np.all(np.abs(rep.inner_corr) < 0.3)
        assert rep.outer_corr is not None

    def test_degenerate_skipped(self):
        runs = self.runs(n_runs=3)
        runs[1] = DependenceRun(np.ones(90), runs[1].values, runs[1].W, "flat")
        with pytest.warns(GeoConformalWarning, match="flat"):
            rep = dependence_analysis(runs)
        assert rep.skipped == ["flat"] and len(rep.labels) == 2

    def test_dict_runs(self):
        r = self.runs(n_runs=2)
        rep = dependence_analysis([{"uncertainty": x.uncertainty, "values": x.values, "W": x.W}
                                   for x in r])
        assert len(rep.inner_corr) == 2


class TestChange:
    def test_identical_runs_degenerate(self):
        W = build_spatial_weights(rand_coords(30), k=4)
        u = np.random.default_rng(0).uniform(size=30)
        res = uncertainty_change_analysis(u, u, np.random.default_rng(1).normal(size=30), W)
        assert res.degenerate and res.correlation is None
        assert res.as_dict()["correlation"] == "degenerate"

    def test_minus_local_i(self):
        W = build_spatial_weights(rand_coords(40), k=5)
        v = np.random.default_rng(2).normal(size=40)
        base = np.ones(40)
        res = uncertainty_change_analysis(base, base - local_morans_i(v, W), v, W)
        assert res.correlation == pytest.approx(-1.0)

    def test_mismatch(self):
        W = build_spatial_weights(rand_coords(10), k=3)
        with pytest.raises(GeoConformalError):
            uncertainty_change_analysis(np.ones(10), np.ones(9), np.ones(10), W)


def scene(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, 1))
    return SpatialDataset(rand_coords(n, seed), x, 3 * x[:, 0] + rng.normal(0, 0.1, n), ("u",))


class TestBootstrap:
    def test_b2_min_max(self):
        ds, test = scene(), scene(15, 1)
        rep = bootstrap_intervals(ds, test, B=2, predictor="gbt",
                                  predictor_params={"n_trees": 5})
        assert np.array_equal(rep.lower, rep.predictions.min(axis=0))
        assert np.array_equal(rep.upper, rep.predictions.max(axis=0))
        assert np.all(rep.lower <= rep.upper) and 0 <= rep.coverage <= 1

    def test_identical_rows(self):
        ds = SpatialDataset(np.ones((20, 2)), np.ones((20, 1)), np.full(20, 2.0), ("u",))
        rep = bootstrap_intervals(ds, scene(5, 2), B=5, predictor_params={"n_trees": 3})
        assert np.all(rep.upper - rep.lower == 0)

    def test_reproducible_and_threads(self):
        ds, test = scene(), scene(10, 1)
        a = bootstrap_intervals(ds, test, B=12, seed=3, predictor_params={"n_trees": 5})
        b = bootstrap_intervals(ds, test, B=12, seed=3, threads=4, predictor_params={"n_trees": 5})
        assert np.array_equal(a.lower, b.lower) and np.array_equal(a.predictions, b.predictions)

    def test_width_grows_with_noise(self):
        rng = np.random.default_rng(0)
        xy = rand_coords(80)
        x = rng.uniform(0, 1, (80, 1))
        test = scene(20, 5)
        widths = []
        for s in (0.01, 1.0):
            ds = SpatialDataset(xy, x, x[:, 0] + rng.normal(0, s, 80), ("u",))
            rep = bootstrap_intervals(ds, test, B=30, predictor="knn")
            widths.append(np.mean(rep.upper - rep.lower))
        assert widths[0] < widths[1]

    def test_errors_and_percentiles(self):
        with pytest.raises(GeoConformalError):
            bootstrap_intervals(scene(), scene(3), B=1)
        with pytest.raises(GeoConformalError, match="replicate 0"):
            bootstrap_intervals(scene(5), scene(3), B=2, predictor="dgsi:base")
        rep = bootstrap_intervals(scene(), scene(8, 1), B=4, predictor="knn")
        pct = bootstrap_error_percentiles(rep, scene(8, 1).target)
        assert list(pct) == [30, 50, 70, 90]
        assert np.all(pct[30] <= pct[90])
