"""Reference-policy training on the size-proportional mixture and early stopping."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
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
    mean_nll,
    save_checkpoint,
)
from .preprocess import EncodedDomain

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.1
EVAL_SUBSET = 2048


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 10_000
    eval_interval: int = 1_000
    batch_size: int = 256
    lr: float = DEFAULT_LR
    seed: int = 0
    delta: float = DEFAULT_DELTA
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    eval_size: int = EVAL_SUBSET

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.total_steps < 1 or self.eval_interval < 1:
            raise DataValidationError("total_steps and eval_interval must be positive")
        if self.total_steps % self.eval_interval:
            raise DataValidationError("eval_interval must divide total_steps")
        if self.delta <= 0:
            raise DataValidationError("overfit gap threshold delta must be positive")
        if self.batch_size < 1 or self.eval_size < 1:
            raise DataValidationError("batch_size and eval_size must be positive")


@dataclass
class CheckpointRecord:
    step: int
    train_loss: np.ndarray
    val_loss: np.ndarray
    path: str | None = None
    params: PolicyParams | None = field(default=None, repr=False, compare=False)

    @property
    def gap(self) -> np.ndarray:
        return np.asarray(self.val_loss) - np.asarray(self.train_loss)

    def __eq__(self, other):
        if not isinstance(other, CheckpointRecord):
            return NotImplemented
        return (
            self.step == other.step
            and np.array_equal(self.train_loss, other.train_loss)
            and np.array_equal(self.val_loss, other.val_loss)
        )


def uniform_weights(domains) -> np.ndarray:
    """Size-proportional mixture: ``size_i / sum(size)``.

    Accepts domains (anything with ``.size``) or raw sizes.
    """
    sizes = np.array([d.size if hasattr(d, "size") and not np.isscalar(d) else d for d in domains], dtype=np.float64)
    if sizes.size == 0:
        raise DataValidationError("uniform_weights needs at least one domain")
    if np.any(sizes <= 0):
        raise DataValidationError("domain sizes must be positive")
    return sizes / sizes.sum()


def sample_mixture_batch(
    rng: np.random.Generator, domains: Sequence[EncodedDomain], alpha: np.ndarray, batch_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw per-domain counts from ``alpha``, then examples uniformly within each domain.

    Returns states, bins and the domain index of each example.
    """
    counts = rng.multinomial(batch_size, alpha)
    states, bins, dom = [], [], []
    for i, (d, c) in enumerate(zip(domains, counts)):
        if c == 0:
            continue
        idx = rng.integers(0, d.size, size=c)
        states.append(d.states[idx])
        bins.append(d.bins[idx])
        dom.append(np.full(c, i))
    return np.concatenate(states), np.concatenate(bins), np.concatenate(dom)


def _eval_subsets(rng, domains: Sequence[EncodedDomain], n: int):
    out = []
    for d in domains:
        if d.size <= n:
            out.append((d.states, d.bins))
        else:
            idx = np.sort(rng.choice(d.size, size=n, replace=False))
            out.append((d.states[idx], d.bins[idx]))
    return out


def _check_domains(train: Sequence[EncodedDomain], val: Sequence[EncodedDomain]) -> None:
    if not train:
        raise DataValidationError("no training domains")
    if len(train) != len(val):
        raise DataValidationError("every domain needs a validation split")
    for t, v in zip(train, val):
        if t.size == 0 or v.size == 0:
            raise DataValidationError(f"domain {t.name!r} has an empty train or validation split")


def train_reference(
    train: Sequence[EncodedDomain],
    val: Sequence[EncodedDomain],
    config: TrainConfig,
    n_bins: int,
    checkpoint_dir: str | Path | None = None,
    meta: dict | None = None,
) -> list[CheckpointRecord]:
    """Train on the size-proportional mixture, logging per-domain losses.

    At every ``eval_interval`` steps the mean NLL of each domain is measured on
    fixed evaluation subsets of its train and validation splits. Checkpoints
    go to ``checkpoint_dir`` when given, otherwise they are kept on the
    returned records. On a non-finite loss the records gathered so far are
    attached to the raised :class:`NumericalError` as ``.records``.
    """
    _check_domains(train, val)
    d_s = train[0].states.shape[1]
    d_a = train[0].bins.shape[1]
    alpha = uniform_weights([d.size for d in train])
    rng = np.random.default_rng([config.seed, 1])
    eval_rng = np.random.default_rng([config.seed, 2])
    train_eval = _eval_subsets(eval_rng, train, config.eval_size)
    val_eval = _eval_subsets(eval_rng, val, config.eval_size)

    params = init_policy(d_s, d_a, n_bins, config.hidden, config.seed)
    opt = init_optimizer(params, config.lr, config.total_steps)
    ones = np.ones(config.batch_size)
    records: list[CheckpointRecord] = []
    for step in range(1, config.total_steps + 1):
        s, b, _ = sample_mixture_batch(rng, train, alpha, config.batch_size)
        logits, acts = forward(params, s)
        grads, loss, _ = loss_and_grad_from_forward(params, logits, acts, b, ones)
        try:
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite reference loss at step {step}")
            adam_step(params, opt, grads)
        except NumericalError as exc:
            exc.records = records
            raise
        if step % config.eval_interval == 0:
            tr = np.array([mean_nll(params, x, y) for x, y in train_eval])
            va = np.array([mean_nll(params, x, y) for x, y in val_eval])
            rec = CheckpointRecord(step, tr, va)
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"step_{step:08d}.npz"
                save_checkpoint(path, params, opt, step, meta)
                rec.path = str(path)
            else:
                rec.params = params.copy()
            records.append(rec)
            log.info("ref step %d: train %s val %s", step, np.round(tr, 4), np.round(va, 4))
    return records


def select_checkpoint(records: Sequence[CheckpointRecord], delta: float = DEFAULT_DELTA) -> int:
    """Latest step such that no domain's val-train gap exceeded ``delta`` at or before it.

    A domain that overfits at some step disqualifies every later step even if
    its gap shrinks again.
    """
    if not records:
        raise DataValidationError("no checkpoint records to select from")
    ordered = sorted(records, key=lambda r: r.step)
    selected = None
    for rec in ordered:
        if np.any(rec.gap > delta):
            break
        selected = rec.step
    if selected is None:
        warnings.warn(
            f"first checkpoint (step {ordered[0].step}) already exceeds the overfit gap {delta}; "
            "selecting it anyway",
            RuntimeWarning,
            stacklevel=2,
        )
        selected = ordered[0].step
    return selected


def write_records_csv(records: Sequence[CheckpointRecord], names: Sequence[str], path) -> None:
    """``records.csv``: one row per (step, domain) with train and validation loss."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "domain", "train_loss", "val_loss"])
        for rec in records:
            for name, tr, va in zip(names, rec.train_loss, rec.val_loss):
                w.writerow([rec.step, name, repr(float(tr)), repr(float(va))])


def read_records_csv(path, names: Sequence[str] | None = None) -> list[CheckpointRecord]:
    rows: dict[int, dict[str, tuple[float, float]]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            step = int(row["step"])
            rows.setdefault(step, {})[row["domain"]] = (float(row["train_loss"]), float(row["val_loss"]))
            if row["domain"] not in order:
                order.append(row["domain"])
    names = list(names) if names is not None else order
    out = []
    for step in sorted(rows):
        vals = rows[step]
        out.append(
            CheckpointRecord(
                step,
                np.array([vals[n][0] for n in names]),
                np.array([vals[n][1] for n in names]),
            )
        )
    return out
