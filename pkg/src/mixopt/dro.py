"""Group DRO over the excess behavior-cloning loss.

Each step draws ``m`` examples from every domain, measures the per-domain
excess loss of the trained policy over a frozen reference, takes one
exponentiated-gradient ascent step on the mixture weights and then one
weighted descent step on the policy. The returned weights are the average
of the mixture over all steps.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DataValidationError, NumericalError
from .policy import (
    DEFAULT_HIDDEN,
    DEFAULT_LR,
    PolicyParams,
    adam_step,
    forward,
    init_optimizer,
    init_policy,
    loss_and_grad_from_forward,
    nll_from_logits,
)
from .preprocess import EncodedDomain
from .validation import SIMPLEX_ATOL, check_finite_array, check_simplex, normalize_simplex

log = logging.getLogger(__name__)

PROVENANCES = ("uniform", "human", "dro_instant", "dro_averaged")


@dataclass(frozen=True)
class MixtureWeights:
    alpha: np.ndarray
    provenance: str = "dro_averaged"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DataValidationError(f"unknown provenance {self.provenance!r}")
        a = check_simplex(self.alpha)
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "alpha", a)

    @property
    def k(self) -> int:
        return self.alpha.shape[0]

    def as_dict(self, names: Sequence[str]) -> dict[str, float]:
        if len(names) != self.k:
            raise DataValidationError("one name per domain is required")
        return {n: float(a) for n, a in zip(names, self.alpha)}


@dataclass(frozen=True)
class DROConfig:
    total_steps: int = 10_000
    eta: float = 0.1
    smoothing: float = 1e-3
    clip_excess_at_zero: bool = True
    per_domain_batch: int = 32
    lr: float = DEFAULT_LR
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.eta > 0:
            raise DataValidationError("eta must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise DataValidationError("smoothing must lie in [0, 1)")
        if self.per_domain_batch < 1:
            raise DataValidationError("per-domain batch size must be >= 1")
        if self.total_steps < 1:
            raise DataValidationError("total_steps must be positive")


@dataclass
class DROTrace:
    """Per-step mixture weights (after the update) and excess-loss estimates."""

    alphas: list[np.ndarray] = field(default_factory=list)
    excess: list[np.ndarray] = field(default_factory=list)
    _sum: np.ndarray | None = field(default=None, repr=False)

    def append(self, alpha: np.ndarray, excess: np.ndarray) -> None:
        self.alphas.append(np.array(alpha, dtype=np.float64))
        self.excess.append(np.array(excess, dtype=np.float64))
        self._sum = self.alphas[-1].copy() if self._sum is None else self._sum + self.alphas[-1]

    def __len__(self) -> int:
        return len(self.alphas)

    @property
    def k(self) -> int:
        return self.alphas[0].shape[0] if self.alphas else 0

    @property
    def running_mean(self) -> np.ndarray:
        if not self.alphas:
            raise DataValidationError("empty trace")
        return self._sum / len(self.alphas)

    def alpha_matrix(self) -> np.ndarray:
        return np.stack(self.alphas)

    def excess_matrix(self) -> np.ndarray:
        return np.stack(self.excess)


# ----------------------------------------------------------------- primitives


def update_alpha(alpha, losses, eta: float = 0.1, smoothing: float = 1e-3) -> np.ndarray:
    """Exponentiated-gradient ascent step on the simplex followed by uniform smoothing."""
    a = check_simplex(alpha, atol=1e-9)
    lam = check_finite_array(losses, "losses", ndim=1)
    if lam.shape != a.shape:
        raise DataValidationError("alpha and losses must have the same length")
    if not eta > 0 or not 0.0 <= smoothing < 1.0:
        raise DataValidationError("need eta > 0 and smoothing in [0, 1)")
    z = eta * lam
    z -= z.max()  # overflow guard; the update only depends on loss differences
    if np.all(z == 0.0) and abs(a.sum() - 1.0) <= SIMPLEX_ATOL:
        hat = a.copy()
    else:
        tilde = a * np.exp(z)
        total = tilde.sum()
        if total <= 0.0:
            # every coordinate underflowed except possibly zero-weight ones
            tilde = (z == 0.0).astype(np.float64)
            total = tilde.sum()
        hat = tilde / total
    if smoothing == 0.0:
        return hat
    k = a.shape[0]
    out = (1.0 - smoothing) * hat + smoothing / k
    return out / out.sum()


def excess_losses(
    theta: PolicyParams,
    ref: PolicyParams,
    batch: Sequence[tuple[np.ndarray, np.ndarray]],
    clip: bool = True,
) -> np.ndarray:
    """Mean of ``nll_theta - nll_ref`` per domain; ``batch`` holds one (states, bins) pair per domain."""
    if theta.shape_signature != ref.shape_signature:
        raise DataValidationError("policy and reference must share d_s, d_a, n_bins and hidden sizes")
    out = np.empty(len(batch))
    for i, item in enumerate(batch):
        if item is None or len(item[0]) == 0:
            raise DataValidationError(f"batch has no examples for domain {i}")
        s, b = item
        lt, _ = forward(theta, s)
        lr, _ = forward(ref, s)
        out[i] = np.mean(nll_from_logits(lt, b) - nll_from_logits(lr, b))
    return np.maximum(out, 0.0) if clip else out


def average_alpha(trace: DROTrace | Sequence[np.ndarray]) -> MixtureWeights:
    alphas = trace.alphas if isinstance(trace, DROTrace) else list(trace)
    if len(alphas) == 0:
        raise DataValidationError("cannot average an empty trace")
    mean = np.mean(np.stack(alphas), axis=0)
    return MixtureWeights(normalize_simplex(mean), "dro_averaged")


# --------------------------------------------------------------------- loop


def _stratified_batch(rng, domains: Sequence[EncodedDomain], m: int):
    batch = []
    for d in domains:
        idx = rng.integers(0, d.size, size=m)
        batch.append((d.states[idx], d.bins[idx]))
    return batch


def run_dro(
    train: Sequence[EncodedDomain],
    ref: PolicyParams,
    config: DROConfig,
    init_alpha: np.ndarray | None = None,
) -> tuple[DROTrace, MixtureWeights]:
    """Run the alternating DRO loop; returns the trace and the averaged weights.

    The trained policy starts from a fresh initialization with the reference's
    architecture. ``init_alpha`` defaults to the uniform vector ``1/k``.
    """
    if not train:
        raise DataValidationError("no training domains")
    k = len(train)
    m = config.per_domain_batch
    if tuple(config.hidden) != ref.hidden:
        raise DataValidationError(
            f"DRO hidden sizes {config.hidden} differ from the reference's {ref.hidden}"
        )
    d_s = train[0].states.shape[1]
    if d_s != ref.d_s or train[0].bins.shape[1] != ref.d_a:
        raise DataValidationError("reference policy dimensions do not match the data")
    theta = init_policy(ref.d_s, ref.d_a, ref.n_bins, ref.hidden, config.seed + 1)
    opt = init_optimizer(theta, config.lr, config.total_steps)
    rng = np.random.default_rng([config.seed, 3])
    alpha = np.full(k, 1.0 / k) if init_alpha is None else check_simplex(init_alpha, atol=1e-9)
    trace = DROTrace()
    dom = np.repeat(np.arange(k), m)

    for step in range(1, config.total_steps + 1):
        batch = _stratified_batch(rng, train, m)
        s = np.concatenate([x for x, _ in batch])
        b = np.concatenate([y for _, y in batch])
        logits, acts = forward(theta, s)
        nll_theta = nll_from_logits(logits, b)
        ref_logits, _ = forward(ref, s)
        nll_ref = nll_from_logits(ref_logits, b)
        lam = (nll_theta - nll_ref).reshape(k, m).mean(axis=1)
        if not np.all(np.isfinite(lam)):
            raise NumericalError(f"non-finite excess loss at DRO step {step}", trace)
        if config.clip_excess_at_zero:
            lam = np.maximum(lam, 0.0)
        alpha = update_alpha(alpha, lam, config.eta, config.smoothing)
        trace.append(alpha, lam)
        weights = alpha[dom] / m
        grads, _, _ = loss_and_grad_from_forward(theta, logits, acts, b, weights)
        try:
            adam_step(theta, opt, grads)
        except NumericalError as exc:
            exc.trace = trace
            raise
        if step % 1000 == 0:
            log.info("dro step %d: alpha %s excess %s", step, np.round(alpha, 4), np.round(lam, 4))

    return trace, average_alpha(trace)


def write_alpha_trace_csv(trace: DROTrace, names: Sequence[str], path) -> None:
    """``alpha_trace.csv``: one row per (step, domain) with alpha and excess loss."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "domain", "alpha", "excess_loss"])
        for t, (a, lam) in enumerate(zip(trace.alphas, trace.excess), start=1):
            for name, ai, li in zip(names, a, lam):
                w.writerow([t, name, repr(float(ai)), repr(float(li))])


def read_alpha_trace_csv(path) -> tuple[DROTrace, list[str]]:
    steps: dict[int, list[tuple[str, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.setdefault(int(row["step"]), []).append(
                (row["domain"], float(row["alpha"]), float(row["excess_loss"]))
            )
    trace = DROTrace()
    names: list[str] = []
    for t in sorted(steps):
        rows = steps[t]
        names = [r[0] for r in rows]
        trace.append(np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
    return trace, names
