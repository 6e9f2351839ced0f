import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixopt.dataset import load_manifest
from mixopt.exceptions import DataValidationError
from mixopt.subset import (
    MixtureSubsampler,
    compute_retention,
    largest_remainder,
    materialize_subset,
    retention_oracle,
)

from conftest import make_domain


@st.composite
def instances(draw, max_k=6, max_size=2000):
    k = draw(st.integers(1, max_k))
    sizes = np.array(draw(st.lists(st.integers(1, max_size), min_size=k, max_size=k)))
    raw = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k)))
    if raw.sum() == 0:
        raw[0] = 1.0
    frac = draw(st.floats(0.01, 1.0))
    return sizes, raw / raw.sum(), frac


def test_no_capping_example():
    plan = compute_retention(np.array([100, 50, 850]), [0.3, 0.05, 0.65], 0.25)
    assert plan.target == 250
    np.testing.assert_allclose(plan.desired, [75, 12.5, 162.5])
    np.testing.assert_array_equal(plan.retained, [75, 12, 163])
    assert not plan.capped.any()


def test_capping_example():
    plan = compute_retention(np.array([20, 980]), [0.2, 0.8], 0.25)
    np.testing.assert_allclose(plan.desired, [50, 200])
    np.testing.assert_array_equal(plan.retained, [20, 230])
    np.testing.assert_array_equal(plan.capped, [True, False])


def test_proportional_weights_keep_fraction():
    sizes = np.array([120, 380, 500])
    plan = compute_retention(sizes, sizes / sizes.sum(), 0.3)
    np.testing.assert_array_equal(plan.retained, np.round(0.3 * sizes))


def test_validation():
    with pytest.raises(DataValidationError):
        compute_retention(np.array([10, 10]), [0.5, 0.5], 1.5)
    with pytest.raises(DataValidationError):
        compute_retention(np.array([10, 10]), [0.5, 0.6], 0.5)
    with pytest.raises(DataValidationError):
        compute_retention(np.array([10, 10]), [1.0], 0.5)
    with pytest.raises(DataValidationError):
        compute_retention(np.array([10.0, 10.0]), [0.5, 0.5], 0.5)


def test_largest_remainder_ties_go_to_lower_index():
    np.testing.assert_array_equal(largest_remainder(np.array([0.5, 0.5, 1.0]), 2), [1, 0, 1])
    np.testing.assert_array_equal(largest_remainder(np.array([1.2, 2.7, 0.1]), 4), [1, 3, 0])


@settings(max_examples=1000, deadline=None)
@given(instances())
def test_retention_invariants(inst):
    sizes, alpha, frac = inst
    plan = compute_retention(sizes, alpha, frac)
    assert plan.retained.sum() == plan.target
    assert np.all(plan.retained <= sizes)
    assert np.all(plan.retained >= np.floor(np.minimum(alpha * plan.target, sizes) + 1e-9))


@settings(max_examples=300, deadline=None)
@given(instances(), st.integers(0, 5), st.floats(0.01, 0.5))
def test_increasing_a_weight_never_decreases_its_count(inst, i, bump):
    sizes, alpha, frac = inst
    i = i % len(sizes)
    boosted = alpha * (1 - bump)
    boosted[i] += bump
    a = compute_retention(sizes, alpha, frac).retained[i]
    b = compute_retention(sizes, boosted / boosted.sum(), frac).retained[i]
    assert b >= a


def test_oracle_examples():
    mean, _ = retention_oracle(np.array([20, 980]), [0.2, 0.8], 0.25, trials=1000)
    assert np.all(np.abs(mean - [20, 230]) <= 0.5)
    mean, std = retention_oracle(np.array([500]), [1.0], 0.3)
    assert mean[0] == 150 and std[0] == 0
    mean, _ = retention_oracle(np.array([100, 50, 850]), [0.3, 0.05, 0.65], 0.25, trials=1000)
    assert np.all(np.abs(mean - [75, 12.5, 162.5]) <= 1.0)


def test_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    trials = 400
    for _ in range(50):
        k = rng.integers(2, 6)
        sizes = rng.integers(5, 400, size=k)
        alpha = rng.dirichlet(np.full(k, 0.5))
        frac = rng.uniform(0.05, 0.9)
        plan = compute_retention(sizes, alpha, frac)
        mean, std = retention_oracle(sizes, alpha, frac, trials=trials, seed=int(rng.integers(1 << 30)))
        se = np.maximum(std / np.sqrt(trials), 1e-9)
        assert np.all(np.abs(plan.allocation - mean) <= 3 * se + 1e-9)
        assert np.all(np.abs(plan.retained - plan.allocation) < 1.0 + 1e-9)


# ------------------------------------------------------------ materialize


def test_materialize_exact_counts(tmp_path):
    domains = [make_domain(0, "a", [5] * 4), make_domain(1, "b", [7] * 140)]
    plan = compute_retention(np.array([20, 980]), [0.2, 0.8], 0.25)
    out, manifest = materialize_subset(domains, plan, seed=1, out_dir=tmp_path / "s")
    assert [d.size for d in out] == [20, 230]
    _, loaded = load_manifest(tmp_path / "s")
    assert [d.size for d in loaded] == [20, 230]
    saved = json.loads((tmp_path / "s" / "retention_plan.json").read_text())
    assert saved["retained"] == [20, 230] and saved["domains"] == ["a", "b"]


def test_materialize_full_retention_keeps_everything(two_domains):
    sizes = np.array([d.size for d in two_domains])
    plan = compute_retention(sizes, sizes / sizes.sum(), 1.0)
    out, _ = materialize_subset(two_domains, plan, seed=0)
    for a, b in zip(two_domains, out):
        key = lambda t: t.states.tobytes()
        assert sorted(a.trajectories, key=key) == sorted(b.trajectories, key=key)


def test_materialize_is_deterministic(tmp_path, two_domains):
    sizes = np.array([d.size for d in two_domains])
    plan = compute_retention(sizes, [0.5, 0.5], 0.6)
    for name in ("x", "y"):
        materialize_subset(two_domains, plan, seed=3, out_dir=tmp_path / name)
    for f in ("manifest.json", "alpha.jsonl", "beta.jsonl", "retention_plan.json"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_materialize_mismatch(two_domains):
    plan = compute_retention(np.array([10, 10]), [0.5, 0.5], 0.5)
    with pytest.raises(DataValidationError):
        materialize_subset(two_domains, plan)


def test_subsampler_estimator(two_domains):
    est = MixtureSubsampler(fraction=0.5, random_state=2)
    out = est.fit_transform(two_domains, np.array([0.5, 0.5]))
    assert sum(d.size for d in out) == est.plan_.target == 17
    assert est.get_params() == {"fraction": 0.5, "random_state": 2}
