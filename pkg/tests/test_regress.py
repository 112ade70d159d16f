import numpy as np
import pytest
from hypothesis import given, strategies as st

from connectome_id.errors import DomainError, ShapeError
from connectome_id.ingest import SynthConfig, generate_synthetic_cohort
from connectome_id.regress import (
    RegressionModel, epsilon_objective, fit_regressor, nrmse, performance_data, plant_performance,
    predict, random_performance, run_performance_experiment, split_counts, squared_objective,
)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(SynthConfig(100, 40, 80, n_tasks=7, seed=5, signature_regions=15))


def _standardized(X, y):
    xs = X.std(axis=0)
    return (X - X.mean(axis=0)) / xs, (y - y.mean()) / y.std()


class TestFit:
    @pytest.mark.parametrize("loss", ["epsilon_insensitive", "squared"])
    def test_exact_linear_recovery(self, rng, loss):
        X = rng.standard_normal((60, 4))
        w = np.array([1.5, -2.0, 0.25, 3.0])
        y = X @ w + 7.0
        model = fit_regressor(X.T, y, loss, regularization=1e-8, epsilon=0.0)
        np.testing.assert_allclose(model.weights, w, atol=1e-5)
        assert model.intercept == pytest.approx(7.0, abs=1e-5)

    def test_constant_target(self, rng):
        X = rng.standard_normal((20, 3))
        model = fit_regressor(X.T, np.full(20, 4.2))
        np.testing.assert_array_equal(model.weights, 0.0)
        assert model.intercept == 4.2

    def test_closed_and_iterative_agree(self, rng):
        X = rng.standard_normal((80, 10))
        y = X @ rng.standard_normal(10) + rng.standard_normal(80)
        closed = fit_regressor(X.T, y, "squared", 0.05, solver="closed")
        iterative = fit_regressor(X.T, y, "squared", 0.05, solver="iterative", tol=1e-12)
        assert abs(closed.objective - iterative.objective) / closed.objective < 1e-6

    def test_closed_form_is_ridge(self, rng):
        X = rng.standard_normal((40, 5))
        y = rng.standard_normal(40)
        lam = 0.3
        model = fit_regressor(X.T, y, "squared", lam, solver="closed")
        Xs, ys = _standardized(X, y)
        w = np.linalg.solve(Xs.T @ Xs / 40 + lam * np.eye(5), Xs.T @ ys / 40)
        np.testing.assert_allclose(model.weights, w * y.std() / X.std(axis=0), atol=1e-12)

    def test_epsilon_objective_is_minimal(self, rng):
        X = rng.standard_normal((50, 3))
        y = X @ [1.0, 0.5, -1.0] + 0.3 * rng.standard_normal(50)
        model = fit_regressor(X.T, y, regularization=0.05, epsilon=0.1)
        Xs, ys = _standardized(X, y)
        w = model.weights * X.std(axis=0) / y.std()
        b = (model.intercept - y.mean() + model.weights @ X.mean(axis=0)) / y.std()
        base = epsilon_objective(Xs, ys, w, b, 0.05, 0.1)
        assert base == pytest.approx(model.objective, rel=1e-9)
        for _ in range(50):
            dw = 1e-3 * rng.standard_normal(3)
            assert epsilon_objective(Xs, ys, w + dw, b, 0.05, 0.1) >= base - 1e-6

    @pytest.mark.parametrize("kw", [
        dict(loss="huber"), dict(regularization=-1.0), dict(epsilon=-0.1),
        dict(regularization=0.0), dict(solver="closed"),
    ])
    def test_invalid_arguments(self, rng, kw):
        with pytest.raises(DomainError):
            fit_regressor(rng.standard_normal((3, 10)), rng.standard_normal(10), **kw)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fit_regressor(rng.standard_normal((3, 10)), rng.standard_normal(9))

    def test_too_few_samples(self):
        with pytest.raises(DomainError):
            fit_regressor(np.ones((3, 1)), np.ones(1))


class TestPredict:
    def test_hand_computed(self):
        model = RegressionModel(np.array([2.0, -1.0]), 0.5, 0.0, "squared", 0.0)
        # columns are samples: (1, 3) and (0, -2)
        np.testing.assert_allclose(predict(model, np.array([[1.0, 0.0], [3.0, -2.0]])), [-0.5, 2.5])

    def test_feature_mismatch(self):
        model = RegressionModel(np.array([2.0, -1.0]), 0.5, 0.0, "squared", 0.0)
        with pytest.raises(ShapeError):
            predict(model, np.ones((3, 4)))


class TestNrmse:
    def test_ten_percent(self):
        y = np.array([0.0, 50.0, 100.0])
        assert nrmse(y + 10.0, y) == pytest.approx(10.0)

    def test_perfect(self):
        assert nrmse(np.arange(5.0), np.arange(5.0)) == 0.0

    def test_mean_normalizer(self):
        assert nrmse(np.array([11.0, 9.0]), np.array([10.0, 10.0 + 1e-9]), "mean") == pytest.approx(10.0, rel=1e-6)

    def test_constant_target(self):
        with pytest.raises(DomainError):
            nrmse(np.ones(3), np.full(3, 2.0))

    def test_bad_normalizer(self):
        with pytest.raises(DomainError):
            nrmse(np.ones(3), np.arange(3.0), "std")

    def test_shapes(self):
        with pytest.raises(ShapeError):
            nrmse(np.ones(3), np.ones(4))

    @given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        y, yh = rng.uniform(0, 100, 10), rng.uniform(0, 100, 10)
        assert nrmse(yh + c, y + c) == pytest.approx(nrmse(yh, y), rel=1e-9)


def test_split_counts():
    assert split_counts(100) == (80, 20)
    assert split_counts(5, 0.99) == (3, 2)


class TestExperiment:
    def test_planted_signal_is_recovered(self, cohort):
        planted, _ = plant_performance(cohort, "wm", 5, 0.01, seed=1)
        rep = run_performance_experiment(planted, "wm", t=30, repeats=20, seed=1)
        assert rep.test_nrmse_mean < 4.0
        assert rep.split == (80, 20)
        assert rep.train_nrmse.shape == (20,)

    def test_single_repeat_reproducible(self, cohort):
        planted, _ = plant_performance(cohort, "wm", seed=2)
        a = run_performance_experiment(planted, "wm", t=10, repeats=1, seed=4)
        b = run_performance_experiment(planted, "wm", t=10, repeats=1, seed=4)
        assert a.test_nrmse_mean == b.test_nrmse_mean
        assert a.selections[0].tolist() == b.selections[0].tolist()

    def test_null_model_matches_mean_baseline(self, cohort):
        null = random_performance(cohort, "wm", seed=3)
        rep = run_performance_experiment(null, "wm", t=5, repeats=50, seed=3)
        gm, y = performance_data(null, "wm")
        baseline = []
        for stream in np.random.SeedSequence(3).spawn(50):
            perm = np.random.default_rng(stream).permutation(y.size)
            tr, te = perm[:80], perm[80:]
            baseline.append(nrmse(np.full(te.size, y[tr].mean()), y[te]))
        assert abs(rep.test_nrmse_mean / np.mean(baseline) - 1) < 0.2

    def test_selection_ignores_test_subjects(self, cohort):
        # the selection depends on training columns only, so scrambling the
        # held-out subjects' scans leaves it unchanged
        planted, _ = plant_performance(cohort, "wm", seed=0)
        gm, y = performance_data(planted, "wm")
        perm = np.random.default_rng(np.random.SeedSequence(9).spawn(1)[0]).permutation(y.size)
        test_cols = np.sort(perm[80:])
        scrambled = gm.a.copy()
        scrambled[:, test_cols] = np.random.default_rng(0).permutation(scrambled[:, test_cols], axis=0)
        gm2 = type(gm)(scrambled, gm.column_ids, gm.feature_ids, gm.region_count)
        a = run_performance_experiment(planted, "wm", t=10, repeats=1, seed=9, data=(gm, y))
        b = run_performance_experiment(planted, "wm", t=10, repeats=1, seed=9, data=(gm2, y))
        assert a.selections[0].tolist() == b.selections[0].tolist()
        assert a.train_nrmse_mean == b.train_nrmse_mean

    def test_missing_scores(self, cohort):
        with pytest.raises(DomainError):
            performance_data(cohort, "motor")


def test_squared_objective_value():
    X = np.array([[1.0], [2.0]])
    assert squared_objective(X, np.array([1.0, 1.0]), np.array([1.0]), 0.0, 2.0) == pytest.approx(0.25 + 1.0)
