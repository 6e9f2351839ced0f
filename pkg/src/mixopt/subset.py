"""Turn mixture weights into per-domain retention counts and materialize the subset.

The target size is ``round(fraction * N)``. Each domain first receives
``floor(min(alpha_i * T, |D_i|))`` points (its capped entitlement). The
shortfall is then spread over domains in proportion to their unselected
points, with largest-remainder rounding, repeating while any domain fills up.
This is the expected outcome of drawing the shortfall uniformly at random
from all unselected points, which :func:`retention_oracle` simulates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import Domain, Manifest, Trajectory, save_dataset
from .exceptions import DataValidationError
from .validation import check_simplex


@dataclass(frozen=True)
class RetentionPlan:
    target: int
    sizes: np.ndarray
    weights: np.ndarray
    desired: np.ndarray
    allocation: np.ndarray  # expected retained count before integer rounding
    retained: np.ndarray
    capped: np.ndarray

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        total = int(self.sizes.sum())
        out = {
            "target": int(self.target),
            "fraction_of_total": self.target / total,
            "sizes": [int(s) for s in self.sizes],
            "weights": [float(w) for w in self.weights],
            "desired": [float(d) for d in self.desired],
            "retained": [int(r) for r in self.retained],
            "capped": [bool(c) for c in self.capped],
            "realized_weights": [int(r) / self.target if self.target else 0.0 for r in self.retained],
            "retained_fraction": [int(r) / int(s) for r, s in zip(self.retained, self.sizes)],
        }
        if names is not None:
            out = {"domains": list(names), **out}
        return out


def largest_remainder(values: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative reals to integers summing to ``total``.

    Floors first, then hands the remaining units to the largest fractional
    parts; ties go to the lower index.
    """
    values = np.asarray(values, dtype=np.float64)
    base = np.floor(values + 1e-9).astype(np.int64)
    left = int(total - base.sum())
    if left < 0 or left > len(values):
        raise DataValidationError("largest_remainder: total inconsistent with values")
    # Round the remainders so float noise (e.g. 12.500000000000002) does not break ties.
    rem = np.round(values - base, 9)
    order = sorted(range(len(values)), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def _target_size(sizes: np.ndarray, fraction: float) -> int:
    return int(math.floor(fraction * sizes.sum() + 0.5))


def _check_inputs(sizes, alpha, fraction):
    sizes = np.asarray(sizes)
    if sizes.ndim != 1 or sizes.size == 0 or not np.issubdtype(sizes.dtype, np.integer):
        raise DataValidationError("sizes must be a non-empty 1-D integer array")
    if np.any(sizes < 0):
        raise DataValidationError("sizes must be non-negative")
    a = check_simplex(alpha, "weights", atol=1e-9)
    if a.shape != sizes.shape:
        raise DataValidationError("one weight per domain is required")
    if not 0.0 < fraction <= 1.0:
        raise DataValidationError(f"fraction must lie in (0, 1], got {fraction}")
    return sizes.astype(np.int64), a


def entitlements(sizes, alpha, fraction) -> tuple[int, np.ndarray, np.ndarray]:
    """Target size, desired counts and integer capped entitlements."""
    sizes, a = _check_inputs(sizes, alpha, fraction)
    target = _target_size(sizes, fraction)
    if target > sizes.sum():
        raise DataValidationError("target size exceeds the dataset")
    desired = a * target
    ent = np.floor(np.minimum(desired, sizes) + 1e-9).astype(np.int64)
    return target, desired, ent


def compute_retention(sizes, alpha, fraction: float) -> RetentionPlan:
    target, desired, retained = entitlements(sizes, alpha, fraction)
    sizes = np.asarray(sizes, dtype=np.int64)
    capped = desired > sizes

    shortfall = target - int(retained.sum())
    cap = sizes - retained
    allocation = retained.astype(np.float64)
    if shortfall > 0:
        allocation = allocation + shortfall * cap / cap.sum()

    while shortfall > 0:
        room = sizes - retained
        share = shortfall * room / room.sum()
        add = largest_remainder(share, shortfall)
        add = np.minimum(add, room)
        retained = retained + add
        shortfall = target - int(retained.sum())
    return RetentionPlan(
        target=target,
        sizes=sizes,
        weights=np.asarray(alpha, dtype=np.float64),
        desired=desired,
        allocation=allocation,
        retained=retained,
        capped=capped,
    )


def retention_oracle(sizes, alpha, fraction: float, trials: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo simulation of capped entitlements plus a uniform random top-up.

    Returns the mean and standard deviation of retained counts over ``trials``.
    """
    target, _, ent = entitlements(sizes, alpha, fraction)
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.sum() > 10_000:
        raise DataValidationError("retention_oracle is meant for small instances (<= 1e4 points)")
    shortfall = target - int(ent.sum())
    owner = np.repeat(np.arange(len(sizes)), sizes - ent)
    rng = np.random.default_rng(seed)
    counts = np.empty((trials, len(sizes)))
    for t in range(trials):
        picked = rng.choice(owner.shape[0], size=shortfall, replace=False) if shortfall else np.empty(0, int)
        counts[t] = ent + np.bincount(owner[picked], minlength=len(sizes))
    return counts.mean(axis=0), counts.std(axis=0)


def materialize_subset(
    domains: Sequence[Domain],
    plan: RetentionPlan,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> tuple[list[Domain], Manifest | None]:
    """Keep whole trajectories in a seeded random order until each domain's count is met.

    The last trajectory taken is truncated so the state-action count is exact.
    """
    if len(domains) != len(plan.retained):
        raise DataValidationError("plan and domain list differ in length")
    for d, n in zip(domains, plan.sizes):
        if d.size != n:
            raise DataValidationError(f"domain {d.name!r} has {d.size} pairs, plan expects {n}")
    out = []
    for d, keep in zip(domains, plan.retained):
        rng = np.random.default_rng([seed, d.id])
        order = rng.permutation(d.n_trajectories)
        taken, left = [], int(keep)
        for i in order:
            if left == 0:
                break
            t = d.trajectories[i]
            if len(t) <= left:
                taken.append(t)
                left -= len(t)
            else:
                taken.append(Trajectory(t.states[:left], t.actions[:left]))
                left = 0
        out.append(Domain(d.id, d.name, tuple(taken)))
    manifest = None
    if out_dir is not None:
        empty = [d.name for d in out if d.n_trajectories == 0]
        if empty:
            raise DataValidationError(f"subset leaves domains empty: {empty}")
        manifest = save_dataset(out, out_dir)
        Path(out_dir, "retention_plan.json").write_text(
            json.dumps(plan.to_json([d.name for d in domains]), indent=2) + "\n", encoding="utf-8"
        )
    return out, manifest


class MixtureSubsampler(BaseEstimator):
    """Subset a list of domains to ``fraction`` of their pairs according to ``weights``."""

    def __init__(self, fraction: float = 0.25, random_state: int = 0):
        self.fraction = fraction
        self.random_state = random_state

    def fit(self, domains: Sequence[Domain], weights):
        alpha = getattr(weights, "alpha", weights)
        self.plan_ = compute_retention(np.array([d.size for d in domains]), alpha, self.fraction)
        return self

    def transform(self, domains: Sequence[Domain]) -> list[Domain]:
        check_is_fitted(self, "plan_")
        return materialize_subset(domains, self.plan_, self.random_state)[0]

    def fit_transform(self, domains, weights):
        return self.fit(domains, weights).transform(domains)
