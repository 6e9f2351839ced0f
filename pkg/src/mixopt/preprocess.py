"""Per-domain action normalization and uniform action binning."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Domain
from .exceptions import DataValidationError
from .validation import check_finite_array

SCHEMES = ("gaussian", "bounds")
STD_FLOOR = 1e-8
DEFAULT_BINS = 256
DEFAULT_CLIP = 5.0


@dataclass(frozen=True)
class NormalizationStats:
    scheme: str
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    domain_id: int | None = None

    @property
    def d_a(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "domain_id": self.domain_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(
            scheme=obj["scheme"],
            mean=np.asarray(obj["mean"], dtype=np.float64),
            std=np.asarray(obj["std"], dtype=np.float64),
            min=np.asarray(obj["min"], dtype=np.float64),
            max=np.asarray(obj["max"], dtype=np.float64),
            domain_id=obj.get("domain_id"),
        )


def _check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise DataValidationError(f"unknown normalization scheme {scheme!r}; choose from {SCHEMES}")


def fit_normalizer_array(actions, scheme: str = "gaussian", domain_id: int | None = None) -> NormalizationStats:
    _check_scheme(scheme)
    a = check_finite_array(actions, "actions", ndim=2)
    if a.shape[0] == 0:
        raise DataValidationError("cannot fit normalizer on an empty action array")
    mean = a.mean(axis=0)
    std = np.maximum(a.std(axis=0), STD_FLOOR)  # population std
    return NormalizationStats(scheme, mean, std, a.min(axis=0), a.max(axis=0), domain_id)


def fit_normalizer(domain: Domain, scheme: str = "gaussian") -> NormalizationStats:
    """Fit statistics on every state-action pair of ``domain``."""
    if domain.n_trajectories == 0:
        raise DataValidationError(f"domain {domain.name!r} is empty")
    return fit_normalizer_array(domain.actions(), scheme, domain.id)


def _check_dim(a: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != stats.d_a:
        raise DataValidationError(
            f"action dimension {a.shape[-1]} does not match stats dimension {stats.d_a}"
        )
    return a


def apply_normalizer(actions, stats: NormalizationStats) -> np.ndarray:
    a = _check_dim(actions, stats)
    if stats.scheme == "gaussian":
        return (a - stats.mean) / stats.std
    span = stats.max - stats.min
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    out = 2.0 * (a - stats.min) / safe - 1.0
    return np.where(degenerate, 0.0, out)


def invert_normalizer(normalized, stats: NormalizationStats) -> np.ndarray:
    z = _check_dim(normalized, stats)
    if stats.scheme == "gaussian":
        return z * stats.std + stats.mean
    span = stats.max - stats.min
    return np.where(span <= 0, stats.min, (z + 1.0) * 0.5 * span + stats.min)


def save_norm_stats(stats: Sequence[NormalizationStats], names: Sequence[str], path) -> None:
    payload = {name: s.to_json() for name, s in zip(names, stats)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_norm_stats(path) -> dict[str, NormalizationStats]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {name: NormalizationStats.from_json(v) for name, v in obj.items() if isinstance(v, dict) and "scheme" in v}


# ------------------------------------------------------------------ discretizer


@dataclass(frozen=True)
class Discretizer:
    n_bins: int
    clip_range: float
    edges: np.ndarray

    @property
    def bin_width(self) -> float:
        return 2.0 * self.clip_range / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def fit_discretizer(n_bins: int = DEFAULT_BINS, clip_range: float = DEFAULT_CLIP) -> Discretizer:
    """Uniform edges over ``[-clip_range, clip_range]``, shared by every action dimension."""
    if int(n_bins) != n_bins or n_bins < 2:
        raise DataValidationError(f"n_bins must be an integer >= 2, got {n_bins!r}")
    if not np.isfinite(clip_range) or clip_range <= 0:
        raise DataValidationError(f"clip_range must be positive, got {clip_range!r}")
    edges = np.linspace(-clip_range, clip_range, int(n_bins) + 1)
    edges.flags.writeable = False
    return Discretizer(int(n_bins), float(clip_range), edges)


def discretize(actions, disc: Discretizer) -> np.ndarray:
    """Map normalized actions to bin indices; bins are half-open ``[e_b, e_{b+1})``."""
    a = check_finite_array(actions, "actions")
    idx = np.searchsorted(disc.edges, a, side="right") - 1
    return np.clip(idx, 0, disc.n_bins - 1).astype(np.int64)


def undiscretize(bins, disc: Discretizer) -> np.ndarray:
    b = np.asarray(bins)
    if b.size and (b.min() < 0 or b.max() >= disc.n_bins):
        raise DataValidationError(f"bin index out of range [0, {disc.n_bins})")
    return disc.centers[b]


# ----------------------------------------------------------------- estimators


class ActionNormalizer(TransformerMixin, BaseEstimator):
    """Fits one set of normalization statistics per domain.

    ``fit(X, groups)`` takes raw actions of shape ``(n, d_a)`` and an optional
    integer domain label per row; ``transform`` must receive the same labels.
    """

    def __init__(self, scheme: str = "gaussian"):
        self.scheme = scheme

    def fit(self, X, y=None, groups=None):
        _check_scheme(self.scheme)
        X = check_finite_array(X, "X", ndim=2)
        groups = self._groups(X, groups)
        self.domains_ = np.unique(groups)
        self.stats_ = {
            int(g): fit_normalizer_array(X[groups == g], self.scheme, int(g)) for g in self.domains_
        }
        self.n_features_in_ = X.shape[1]
        return self

    def _groups(self, X, groups):
        if groups is None:
            return np.zeros(X.shape[0], dtype=np.int64)
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise DataValidationError("groups must have one label per row")
        return groups

    def _apply(self, X, groups, fn):
        check_is_fitted(self, "stats_")
        X = check_finite_array(X, "X", ndim=2)
        groups = self._groups(X, groups)
        out = np.empty_like(X)
        for g in np.unique(groups):
            if int(g) not in self.stats_:
                raise DataValidationError(f"no statistics fitted for domain {g}")
            mask = groups == g
            out[mask] = fn(X[mask], self.stats_[int(g)])
        return out

    def transform(self, X, groups=None):
        return self._apply(X, groups, apply_normalizer)

    def inverse_transform(self, X, groups=None):
        return self._apply(X, groups, invert_normalizer)

    def fit_transform(self, X, y=None, groups=None):
        return self.fit(X, y, groups).transform(X, groups)


class ActionDiscretizer(TransformerMixin, BaseEstimator):
    """Uniform binning of normalized actions; ``inverse_transform`` returns bin centers."""

    def __init__(self, n_bins: int = DEFAULT_BINS, clip_range: float = DEFAULT_CLIP):
        self.n_bins = n_bins
        self.clip_range = clip_range

    def fit(self, X=None, y=None):
        self.discretizer_ = fit_discretizer(self.n_bins, self.clip_range)
        self.bin_edges_ = self.discretizer_.edges
        if X is not None:
            self.n_features_in_ = np.asarray(X).shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "discretizer_")
        return discretize(X, self.discretizer_)

    def inverse_transform(self, X):
        check_is_fitted(self, "discretizer_")
        return undiscretize(X, self.discretizer_)


# ------------------------------------------------------------------- stage 1


@dataclass(frozen=True)
class EncodedDomain:
    """States and binned actions of one domain, ready for training."""

    id: int
    name: str
    states: np.ndarray
    bins: np.ndarray

    @property
    def size(self) -> int:
        return self.states.shape[0]


def encode_domain(domain: Domain, stats: NormalizationStats, disc: Discretizer) -> EncodedDomain:
    if stats.domain_id is not None and stats.domain_id != domain.id:
        raise DataValidationError(
            f"statistics fitted on domain {stats.domain_id} applied to domain {domain.id}"
        )
    bins = discretize(apply_normalizer(domain.actions(), stats), disc)
    return EncodedDomain(domain.id, domain.name, domain.states(), bins)


def preprocess_domains(
    train: Sequence[Domain],
    val: Sequence[Domain] | None,
    scheme: str = "gaussian",
    n_bins: int = DEFAULT_BINS,
    clip_range: float = DEFAULT_CLIP,
) -> tuple[list[EncodedDomain], list[EncodedDomain] | None, list[NormalizationStats], Discretizer]:
    """Fit per-domain statistics on the training split and encode both splits with them."""
    disc = fit_discretizer(n_bins, clip_range)
    stats = [fit_normalizer(d, scheme) for d in train]
    enc_train = [encode_domain(d, s, disc) for d, s in zip(train, stats)]
    enc_val = None
    if val is not None:
        if [d.id for d in val] != [d.id for d in train]:
            raise DataValidationError("train and validation domain lists do not line up")
        enc_val = [encode_domain(d, s, disc) for d, s in zip(val, stats)]
    return enc_train, enc_val, stats, disc
