from __future__ import annotations

import json

import numpy as np
import pytest

from mixedprefix.autodiff import RngStream
from mixedprefix.errors import ConvergenceError, CorpusFormatError, RankDeficientError
from mixedprefix.lmm import (
    GroupedDataset,
    fit_complete_pool,
    fit_mixed,
    fit_no_pool,
    shrinkage_curve,
    shrinkage_weight,
    write_fit,
)


def random_intercepts(n_groups=6, per_group=8, sigma=2.0, noise=1.0, seed=0):
    rng = RngStream(seed, "lmm-test")
    ys, groups = [], []
    for g in range(n_groups):
        b = float(rng.normal(0.0, sigma))
        ys.extend(3.0 + b + rng.normal(0.0, noise, per_group))
        groups.extend([f"g{g}"] * per_group)
    return GroupedDataset.intercept_only(ys, groups)


def random_slopes(n_groups=5, per_group=6, seed=1):
    rng = RngStream(seed, "lmm-slopes")
    X, ys, groups = [], [], []
    for g in range(n_groups):
        a, b = rng.normal(0.0, 1.0, 2)
        for x in np.linspace(-1.0, 1.0, per_group):
            X.append([1.0, x])
            ys.append(1.0 + a + (0.5 + b) * x + float(rng.normal(0.0, 0.3)))
            groups.append(f"g{g}")
    return GroupedDataset(np.asarray(X), np.asarray(ys), groups, ["intercept", "x"])


def test_posterior_mean_closed_form():
    data = GroupedDataset.intercept_only([1.0, 2.0, 3.0], ["a", "a", "a"])
    fit = fit_mixed(data, "known", sigma=1.0, noise=1.0, mu=[0.0])
    assert fit.offsets["a"][0] == pytest.approx(1.5, abs=1e-10)
    assert fit.coefficients("a")[0] == pytest.approx(1.5, abs=1e-10)


def test_zero_scale_is_complete_pooling():
    data = random_intercepts()
    fit = fit_mixed(data, "known", sigma=0.0, noise=1.0)
    pooled = fit_complete_pool(data)
    for g in data.group_names():
        assert np.array_equal(fit.coefficients(g), pooled)


def test_huge_scale_approaches_no_pooling():
    data = random_intercepts()
    fit = fit_mixed(data, "known", sigma=1e6, noise=1.0)
    separate = fit_no_pool(data)
    for g in data.group_names():
        np.testing.assert_allclose(fit.coefficients(g), separate.coefficients[g], atol=1e-4)


def test_huge_scale_approaches_no_pooling_with_slopes():
    data = random_slopes()
    fit = fit_mixed(data, "known", sigma=[1e6, 1e6], noise=0.3, random_slopes=True)
    separate = fit_no_pool(data)
    for g in data.group_names():
        np.testing.assert_allclose(fit.coefficients(g), separate.coefficients[g], atol=1e-4)


def test_group_without_data_gets_the_population_mean():
    fit = fit_mixed(random_intercepts(), "known", sigma=1.0, noise=1.0)
    assert np.array_equal(fit.coefficients("absent"), fit.mu)


def test_known_mode_arguments_are_checked():
    data = random_intercepts()
    with pytest.raises(ValueError):
        fit_mixed(data, "known")
    with pytest.raises(ValueError):
        fit_mixed(data, "known", sigma=-1.0, noise=1.0)
    with pytest.raises(ValueError):
        fit_mixed(data, "known", sigma=1.0, noise=0.0)
    with pytest.raises(ValueError):
        fit_mixed(data, "bayes")


def test_shrinkage_weight_grows_with_group_size():
    sizes = [1, 2, 4, 16, 64, 256]
    w = shrinkage_weight(np.asarray(sizes), 1.0, 1.0)
    assert np.all(np.diff(w) > 0)
    assert shrinkage_weight(1, 1.0, 1.0) == pytest.approx(0.5)


def test_shrinkage_curve_interpolates_between_pooled_and_group_mean():
    rows = shrinkage_curve([1, 4, 16, 64], sigma=1.0, noise=1.0, seed=3)
    assert [r["n"] for r in rows] == [1, 4, 16, 64]
    assert all(a["weight"] < b["weight"] for a, b in zip(rows, rows[1:]))
    for r in rows:
        lo, hi = sorted([r["pooled"], r["group_mean"]])
        assert lo < r["mixed"] < hi
        assert r["offset"] == pytest.approx(r["weight"] * (r["group_mean"] - r["pooled"]), abs=1e-10)
        assert r["distance_to_no_pool"] + r["distance_to_pooled"] == pytest.approx(abs(r["group_mean"] - r["pooled"]), abs=1e-10)


def test_shrinkage_curve_rejects_empty_groups():
    with pytest.raises(ValueError):
        shrinkage_curve([0, 4])


def test_mixed_estimate_sits_between_pooled_and_own_mean_for_unbalanced_groups():
    ys = list(RngStream(7, "unbalanced").normal(0.0, 1.0, 100)) + [10.0, 0.5]
    data = GroupedDataset.intercept_only(ys, ["a"] * 100 + ["b", "c"])
    fit = fit_mixed(data, "known", sigma=1.0, noise=1.0)
    pooled = fit_complete_pool(data)[0]
    separate = fit_no_pool(data)
    for g in data.group_names():
        lo, hi = sorted([pooled, separate.coefficients[g][0]])
        assert lo < fit.coefficients(g)[0] < hi, g
    assert fit.log_likelihood is not None


def test_complete_pool_solves_the_normal_equations():
    data = random_slopes()
    np.testing.assert_allclose(
        fit_complete_pool(data), np.linalg.solve(data.X.T @ data.X, data.X.T @ data.y), atol=1e-10
    )


def test_no_pool_solves_the_normal_equations_per_group():
    data = random_slopes()
    fit = fit_no_pool(data)
    assert fit.flagged == []
    for g, rows in data.group_rows().items():
        X, y = data.X[rows], data.y[rows]
        np.testing.assert_allclose(fit.coefficients[g], np.linalg.solve(X.T @ X, X.T @ y), atol=1e-10)


def test_complete_pool_of_two_equal_groups_is_the_midpoint():
    data = GroupedDataset.intercept_only([-1.0, 1.0, 1.0, 3.0], ["a", "a", "b", "b"])
    assert fit_complete_pool(data)[0] == pytest.approx(1.0, abs=1e-12)


def test_singleton_group_no_pool_is_its_observation():
    data = GroupedDataset.intercept_only([4.0, 5.0, 2.5], ["a", "a", "b"])
    assert fit_no_pool(data).coefficients["b"][0] == pytest.approx(2.5, abs=1e-12)


def test_estimated_mode_climbs_monotonically():
    fit = fit_mixed(random_intercepts(n_groups=8, per_group=10), "estimated")
    assert fit.mode == "estimated"
    assert all(b >= a for a, b in zip(fit.trace, fit.trace[1:]))
    assert fit.sigma[0] > 0.0 and fit.noise > 0.0
    assert fit.log_likelihood == fit.trace[-1]


def test_estimated_mode_reports_non_convergence():
    with pytest.raises(ConvergenceError) as info:
        fit_mixed(random_intercepts(), "estimated", max_iter=1)
    assert len(info.value.trace) >= 1


def test_rank_deficient_design():
    X = np.ones((6, 2))
    data = GroupedDataset(X, np.arange(6.0), ["a"] * 3 + ["b"] * 3)
    with pytest.raises(RankDeficientError):
        fit_complete_pool(data)
    with pytest.raises(RankDeficientError):
        fit_mixed(data, "known", sigma=1.0, noise=1.0)


def test_no_pool_flags_underdetermined_groups():
    X = [[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 5.0]]
    data = GroupedDataset(np.asarray(X), [0.0, 1.0, 2.0, 3.0], ["a", "a", "a", "b"])
    fit = fit_no_pool(data)
    assert fit.flagged == ["b"]
    np.testing.assert_allclose(fit.coefficients["a"], [0.0, 1.0], atol=1e-12)


def test_from_csv(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("group,x,y\na,0,1\na,1,2\nb,0,3\nb,1,5\n", encoding="utf-8")
    data = GroupedDataset.from_csv(path, ["x"])
    assert data.columns == ["intercept", "x"]
    assert data.sizes() == {"a": 2, "b": 2}
    with pytest.raises(CorpusFormatError):
        GroupedDataset.from_csv(path, ["z"])


def test_write_fit(tmp_path):
    data = random_intercepts()
    path = write_fit(tmp_path / "fit.json", fit_mixed(data, "known", sigma=1.0, noise=1.0))
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload["mode"] == "known"
    assert sorted(payload["coefficients"]) == data.group_names()
