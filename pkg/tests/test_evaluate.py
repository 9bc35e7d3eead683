import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imgqsar.evaluate import (PredictionSet, UndefinedCorrelation, ensemble_average, error_correlation,
                              mean_predictor_baseline, pearson, regression_metrics, residual_table, rmse)
from oracles import brute_force_rmse


def ps(obs, pred, fam="convnet", ids=None, run="r"):
    ids = ids or [f"c{i}" for i in range(len(obs))]
    return PredictionSet(run, fam, ids, obs, pred)


class TestRmse:
    def test_perfect(self):
        assert rmse(ps([1, 2, 3], [1, 2, 3])) == 0

    def test_mean_prediction_is_population_sd(self):
        obs = np.random.default_rng(0).normal(6, 1, 50)
        assert rmse(ps(obs, np.full(50, obs.mean()))) == pytest.approx(obs.std(ddof=0), rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            rmse(ps([], []))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=1, max_size=50))
    def test_matches_brute_force(self, pairs):
        obs, pred = zip(*pairs)
        assert rmse(ps(list(obs), list(pred))) == pytest.approx(brute_force_rmse(obs, pred), rel=1e-9, abs=1e-12)


class TestMetrics:
    def test_linear_not_accurate(self):
        obs = np.array([1.0, 2.0, 3.0, 4.0])
        m = regression_metrics(ps(obs, 2 * obs + 1))
        assert m.pearson_r == pytest.approx(1.0) and m.r2 == pytest.approx(1.0) and m.rmse > 0

    def test_anticorrelated(self):
        assert pearson([0, 1], [1, 0]) == pytest.approx(-1.0)
        m = regression_metrics(ps([0, 1, 2], [2, 1, 0]))
        assert m.pearson_r == pytest.approx(-1.0)

    def test_constant_observed(self):
        with pytest.raises(UndefinedCorrelation):
            regression_metrics(ps([5, 5, 5], [1, 2, 3]))

    def test_too_few(self):
        with pytest.raises(ValueError):
            regression_metrics(ps([1, 2], [1, 2]))

    def test_validation(self):
        with pytest.raises(ValueError):
            PredictionSet("r", "svm", ["a"], [1], [1])
        with pytest.raises(ValueError):
            PredictionSet("r", "rf", ["a", "a"], [1, 2], [1, 2])
        with pytest.raises(ValueError):
            PredictionSet("r", "rf", ["a"], [1, 2], [1])


class TestBaseline:
    def test_mean(self):
        b = mean_predictor_baseline([4, 6], (["a", "b", "c"], [1, 2, 3]))
        assert b.predicted.tolist() == [5.0, 5.0, 5.0] and b.model_family == "mean_baseline"
        assert rmse(b) >= 0

    def test_residual_mean_zero_on_training(self):
        y = np.random.default_rng(1).normal(6, 1, 30)
        b = mean_predictor_baseline(y, ([f"c{i}" for i in range(30)], y))
        _, summ = residual_table(b)
        assert summ["mean"] == pytest.approx(0, abs=1e-12)


class TestEnsemble:
    def test_average(self):
        e = ensemble_average(ps([7.0], [6.0], "rf", ["x"]), ps([7.0], [8.0], "convnet", ["x"]))
        assert e.predicted.tolist() == [7.0] and e.model_family == "ensemble"

    def test_idempotent(self):
        a = ps([1, 2, 3], [1.5, 2.5, 2.0])
        assert np.array_equal(ensemble_average(a, a).predicted, a.predicted)

    def test_aligns_by_id(self):
        a = ps([1, 2], [1, 2], ids=["a", "b"])
        b = ps([2, 1], [4, 3], ids=["b", "a"])
        assert ensemble_average(a, b).predicted.tolist() == [2.0, 3.0]

    def test_id_mismatch_lists_difference(self):
        with pytest.raises(ValueError, match=r"\['c', 'd'\]"):
            ensemble_average(ps([1, 2], [1, 2], ids=["a", "c"]), ps([1, 2], [1, 2], ids=["a", "d"]))

    def test_observed_mismatch(self):
        with pytest.raises(ValueError):
            ensemble_average(ps([1, 2], [1, 2]), ps([1, 3], [1, 2]))

    def test_convexity_on_random_vectors(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            obs = rng.normal(6, 1, n)
            a = ps(obs, obs + rng.normal(0, rng.uniform(0.1, 2), n))
            b = ps(obs, obs + rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), n))
            e = ensemble_average(a, b)
            assert brute_force_rmse(e.observed, e.predicted) <= max(rmse(a), rmse(b)) + 1e-12


class TestResiduals:
    def test_perfect(self):
        t, summ = residual_table(ps([1, 2, 3, 4], [1, 2, 3, 4]))
        assert (t["residual"] == 0).all() and summ["mean"] == 0

    def test_sign_and_bins(self):
        t, summ = residual_table(ps([1, 2, 3, 4, 5], [0, 2, 3, 4, 6]), n_bins=2)
        assert t["residual"].tolist() == [1, 0, 0, 0, -1]
        assert sum(b["n"] for b in summ["bins"]) == 5


class TestErrorCorrelation:
    def test_self(self):
        a = ps([1, 2, 3, 4], [1.5, 1.8, 3.3, 4.4])
        assert error_correlation(a, a) == pytest.approx((1.0, 1.0))

    def test_constant(self):
        a = ps([1, 2, 3], [1, 1, 1])
        with pytest.raises(UndefinedCorrelation):
            error_correlation(a, ps([1, 2, 3], [1, 2, 4]))

    def test_csv_roundtrip(self, tmp_path):
        a = ps([1.0, 2.5, 3.25], [1.1, 2.2, 3.3], "rf", run="run-1")
        a.write_csv(tmp_path / "p.csv")
        b = PredictionSet.read_csv(tmp_path / "p.csv", "rf")
        assert b.run_id == "run-1" and b.compound_ids == a.compound_ids
        assert np.array_equal(b.observed, a.observed) and np.array_equal(b.predicted, a.predicted)
