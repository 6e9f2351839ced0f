import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixopt.exceptions import DataValidationError
from mixopt.preprocess import (
    ActionDiscretizer,
    ActionNormalizer,
    NormalizationStats,
    apply_normalizer,
    discretize,
    encode_domain,
    fit_discretizer,
    fit_normalizer,
    fit_normalizer_array,
    invert_normalizer,
    load_norm_stats,
    preprocess_domains,
    save_norm_stats,
    undiscretize,
)

from conftest import make_domain


def test_gaussian_stats_known_values():
    stats = fit_normalizer_array([[0.0, 10.0], [2.0, 10.0], [4.0, 10.0]], "gaussian")
    np.testing.assert_allclose(stats.mean, [2.0, 10.0])
    # population std of (0, 2, 4) is sqrt(8/3); constant column hits the floor
    np.testing.assert_allclose(stats.std, [np.sqrt(8 / 3), 1e-8])


def test_bounds_known_values():
    stats = fit_normalizer_array([[0.0, 3.0], [2.0, 3.0], [4.0, 3.0]], "bounds")
    out = apply_normalizer([[0.0, 3.0], [1.0, 3.0], [4.0, 3.0]], stats)
    np.testing.assert_allclose(out, [[-1.0, 0.0], [-0.5, 0.0], [1.0, 0.0]])


def test_degenerate_dimension_maps_to_single_bin():
    disc = fit_discretizer()
    for scheme in ("gaussian", "bounds"):
        a = np.column_stack([np.linspace(-1, 1, 50), np.full(50, 7.0)])
        bins = discretize(apply_normalizer(a, fit_normalizer_array(a, scheme)), disc)
        assert len(np.unique(bins[:, 1])) == 1


def test_gaussian_moments_on_own_domain():
    rng = np.random.default_rng(1)
    a = rng.normal(3.0, 0.2, size=(5000, 4)) * [1, 10, 0.01, 100]
    z = apply_normalizer(a, fit_normalizer_array(a, "gaussian"))
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(z.std(axis=0) - 1.0) <= 1e-6)


def test_bounds_extremes_exact():
    rng = np.random.default_rng(2)
    a = rng.uniform(-30, 5, size=(1000, 3))
    z = apply_normalizer(a, fit_normalizer_array(a, "bounds"))
    np.testing.assert_allclose(z.min(axis=0), -1.0, atol=1e-12)
    np.testing.assert_allclose(z.max(axis=0), 1.0, atol=1e-12)


@pytest.mark.parametrize("scheme", ["gaussian", "bounds"])
def test_invert_roundtrip(scheme):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(200, 3)) * 4 + 1
    stats = fit_normalizer_array(a, scheme)
    np.testing.assert_allclose(invert_normalizer(apply_normalizer(a, stats), stats), a, atol=1e-10)


def test_fit_rejects_bad_input():
    with pytest.raises(DataValidationError):
        fit_normalizer_array(np.empty((0, 2)))
    with pytest.raises(DataValidationError):
        fit_normalizer_array([[np.nan, 1.0]])
    with pytest.raises(DataValidationError):
        fit_normalizer_array([[1.0]], "minmax")
    stats = fit_normalizer_array([[1.0, 2.0], [2.0, 3.0]])
    with pytest.raises(DataValidationError):
        apply_normalizer([[1.0, 2.0, 3.0]], stats)


def test_stats_json_roundtrip(tmp_path):
    stats = [fit_normalizer_array(np.arange(12.0).reshape(6, 2) * (i + 1), "bounds", i) for i in range(2)]
    save_norm_stats(stats, ["a", "b"], tmp_path / "norm_stats.json")
    obj = json.loads((tmp_path / "norm_stats.json").read_text())
    assert set(obj["a"]) >= {"scheme", "mean", "std", "min", "max"}
    loaded = load_norm_stats(tmp_path / "norm_stats.json")
    for s, name in zip(stats, ["a", "b"]):
        for field in ("mean", "std", "min", "max"):
            np.testing.assert_array_equal(getattr(loaded[name], field), getattr(s, field))
    assert NormalizationStats.from_json(stats[0].to_json()).scheme == "bounds"


# ------------------------------------------------------------------ binning


def test_default_bin_width():
    assert fit_discretizer(256, 5.0).bin_width == 10 / 256 == 0.0390625


def test_two_bins_edges():
    np.testing.assert_array_equal(fit_discretizer(2, 1.0).edges, [-1.0, 0.0, 1.0])


def test_zero_is_left_edge_of_middle_bin():
    disc = fit_discretizer(256, 5.0)
    assert discretize(np.array([0.0]), disc)[0] == 128


def test_clipping():
    disc = fit_discretizer(256, 5.0)
    np.testing.assert_array_equal(discretize(np.array([7.3, 5.0, -5.0, -99.0]), disc), [255, 255, 0, 0])


def test_invalid_discretizer():
    for b, r in [(1, 1.0), (2.5, 1.0), (4, 0.0), (4, -1.0), (4, np.inf)]:
        with pytest.raises(DataValidationError):
            fit_discretizer(b, r)
    with pytest.raises(DataValidationError):
        undiscretize(np.array([4]), fit_discretizer(4, 1.0))


@given(st.integers(2, 1024), st.floats(0.01, 100.0))
def test_edges_strictly_increasing(n_bins, clip):
    edges = fit_discretizer(n_bins, clip).edges
    assert len(edges) == n_bins + 1
    assert np.all(np.diff(edges) > 0)


def test_reconstruction_within_half_width():
    disc = fit_discretizer(256, 5.0)
    a = np.random.default_rng(4).uniform(-5, 5, size=10_000)
    err = np.abs(undiscretize(discretize(a, disc), disc) - a)
    assert err.max() <= 0.01953125


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-20, 20)), st.integers(2, 300), st.floats(0.1, 10))
def test_binning_monotone(values, n_bins, clip):
    disc = fit_discretizer(n_bins, clip)
    v = np.sort(values)
    assert np.all(np.diff(discretize(v, disc)) >= 0)


# --------------------------------------------------------------- estimators


def test_action_normalizer_per_group():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(0, 1, (100, 2)), rng.normal(50, 10, (80, 2))])
    g = np.repeat([0, 1], [100, 80])
    est = ActionNormalizer("gaussian")
    Z = est.fit_transform(X, groups=g)
    for k in (0, 1):
        np.testing.assert_allclose(Z[g == k].mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(est.inverse_transform(Z, groups=g), X)
    assert est.get_params() == {"scheme": "gaussian"}
    with pytest.raises(DataValidationError):
        est.transform(X, groups=np.full(len(X), 7))


def test_action_discretizer_estimator():
    est = ActionDiscretizer(n_bins=4, clip_range=1.0).fit()
    np.testing.assert_array_equal(est.transform(np.array([-2.0, -0.6, 0.0, 0.9])), [0, 0, 2, 3])
    np.testing.assert_allclose(est.inverse_transform(np.array([0, 3])), [-0.75, 0.75])
    assert est.get_params()["n_bins"] == 4


# ------------------------------------------------------------------ stage 1


def test_preprocess_uses_only_train_split_stats(two_domains):
    train = two_domains
    val = [make_domain(0, "alpha", [3], seed=9), make_domain(1, "beta", [3], seed=9)]
    enc_train, enc_val, stats, disc = preprocess_domains(train, val, "gaussian", 16, 3.0)
    for d, s in zip(train, stats):
        np.testing.assert_allclose(s.mean, d.actions().mean(axis=0))
        assert s.domain_id == d.id
    assert enc_val[1].bins.shape == (3, 2)
    assert enc_train[0].bins.max() < 16


def test_cross_domain_application_refused(two_domains):
    stats = fit_normalizer(two_domains[0])
    with pytest.raises(DataValidationError):
        encode_domain(two_domains[1], stats, fit_discretizer())
