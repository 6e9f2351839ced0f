"""Discrete behavior-cloning policy.

An MLP maps a state to ``d_a`` independent categorical distributions over
``n_bins`` action bins. The loss of one example is the sum over action
dimensions of the per-head negative log-likelihood. Gradients are computed
by hand (no autodiff) so they can be checked against finite differences.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataValidationError, NumericalError
from .validation import check_bins, check_finite_array

CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (256, 256)
DEFAULT_LR = 2e-4
OUTPUT_INIT_SCALE = 0.1


@dataclass
class PolicyParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    d_s: int
    d_a: int
    n_bins: int
    seed: int

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def shape_signature(self) -> tuple:
        return (self.d_s, self.d_a, self.n_bins, self.hidden)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.d_s,
            self.d_a,
            self.n_bins,
            self.seed,
        )

    def tensors(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def check_finite(self) -> None:
        for i, t in enumerate(self.tensors()):
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"parameter tensor {i} became non-finite")


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = DEFAULT_LR
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_policy(d_s: int, d_a: int, n_bins: int, hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0) -> PolicyParams:
    """He-normal hidden layers, a down-scaled LeCun-normal output layer, zero biases.

    The output scale keeps every head close to uniform at initialization.
    """
    if min(d_s, d_a, n_bins) < 1 or any(h < 1 for h in hidden):
        raise DataValidationError("policy dimensions must be positive")
    rng = np.random.default_rng(seed)
    sizes = [d_s, *hidden, d_a * n_bins]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = math.sqrt(2.0 / fan_in) if i < len(sizes) - 2 else OUTPUT_INIT_SCALE / math.sqrt(fan_in)
        weights.append(rng.normal(size=(fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return PolicyParams(weights, biases, d_s, d_a, n_bins, seed)


def forward(params: PolicyParams, states: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits of shape ``(n, d_a, n_bins)`` and the activations needed for backprop."""
    h = states
    acts = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h.reshape(states.shape[0], params.d_a, params.n_bins), acts


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=-1, keepdims=True)
    z = logits - shift
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _gather(logp: np.ndarray, bins: np.ndarray) -> np.ndarray:
    return np.take_along_axis(logp, bins[:, :, None], axis=-1)[:, :, 0]


def nll_from_logits(logits: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Per-example NLL summed over action dimensions."""
    return -_gather(log_softmax(logits), bins).sum(axis=1)


def _prep(params: PolicyParams, states, bins):
    s = check_finite_array(states, "states")
    if s.ndim == 1:
        s = s[None, :]
    if s.shape[1] != params.d_s:
        raise DataValidationError(f"state dimension {s.shape[1]} != policy d_s {params.d_s}")
    b = check_bins(bins, params.d_a, params.n_bins)
    if b.shape[0] != s.shape[0]:
        raise DataValidationError("states and action bins differ in length")
    return s, b


def nll(params: PolicyParams, states, action_bins) -> np.ndarray | float:
    """Negative log-likelihood of discretized actions; scalar for a single example."""
    single = np.ndim(states) == 1
    s, b = _prep(params, states, action_bins)
    logits, _ = forward(params, s)
    out = nll_from_logits(logits, b)
    return float(out[0]) if single else out


def mean_nll(params: PolicyParams, states: np.ndarray, bins: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, states.shape[0], chunk):
        logits, _ = forward(params, states[start : start + chunk])
        total += nll_from_logits(logits, bins[start : start + chunk]).sum()
    return total / states.shape[0]


def backward(params: PolicyParams, acts: list[np.ndarray], dlogits: np.ndarray) -> Gradients:
    """Backpropagate ``dL/dlogits`` (shape ``(n, d_a, n_bins)``) through the MLP."""
    delta = dlogits.reshape(dlogits.shape[0], -1)
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    return Gradients(gw, gb)


def loss_and_grad_from_forward(
    params: PolicyParams, logits: np.ndarray, acts: list[np.ndarray], bins: np.ndarray, weights: np.ndarray
) -> tuple[Gradients, float, np.ndarray]:
    """Weighted-mean NLL gradient reusing an existing forward pass.

    Returns gradients, the weighted mean loss and the per-example losses.
    """
    logp = log_softmax(logits)
    per_example = -_gather(logp, bins).sum(axis=1)
    wn = weights / weights.sum()
    dlogits = np.exp(logp)
    np.put_along_axis(
        dlogits, bins[:, :, None], np.take_along_axis(dlogits, bins[:, :, None], axis=-1) - 1.0, axis=-1
    )
    dlogits *= wn[:, None, None]
    grads = backward(params, acts, dlogits)
    return grads, float(wn @ per_example), per_example


def grad_nll(params: PolicyParams, states, action_bins, weights=None) -> tuple[Gradients, float]:
    """Gradient of ``sum_j w_j nll_j / sum_j w_j`` and that weighted mean loss."""
    s, b = _prep(params, states, action_bins)
    if weights is None:
        w = np.ones(s.shape[0])
    else:
        w = check_finite_array(weights, "weights", ndim=1)
        if w.shape[0] != s.shape[0]:
            raise DataValidationError("one weight per example is required")
        if np.any(w < 0):
            raise DataValidationError("example weights must be non-negative")
    if w.sum() <= 0:
        raise DataValidationError("example weights are all zero")
    logits, acts = forward(params, s)
    grads, loss, _ = loss_and_grad_from_forward(params, logits, acts, b, w)
    return grads, loss


# ------------------------------------------------------------------ optimizer


def cosine_lr(step: int, total_steps: int, lr: float) -> float:
    """Cosine decay from ``lr`` at step 0 to 0 at ``total_steps``."""
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def init_optimizer(params: PolicyParams, lr: float = DEFAULT_LR, total_steps: int = 1, **kw) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(t) for t in params.tensors()],
        v=[np.zeros_like(t) for t in params.tensors()],
        step=0,
        lr=lr,
        total_steps=total_steps,
        **kw,
    )


def adam_step(params: PolicyParams, state: OptimizerState, grads: Gradients, lr: float | None = None) -> tuple[PolicyParams, OptimizerState]:
    """One bias-corrected Adam update, in place. ``lr`` overrides the cosine schedule."""
    g_list = grads.tensors()
    p_list = params.tensors()
    if len(g_list) != len(p_list) or any(g.shape != p.shape for g, p in zip(g_list, p_list)):
        raise DataValidationError("gradient structure does not match parameters")
    for i, g in enumerate(g_list):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {i} at step {state.step}")
    step_lr = cosine_lr(state.step, state.total_steps, state.lr) if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    params.check_finite()
    return params, state


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: PolicyParams, opt: OptimizerState | None = None, step: int = 0, meta: dict | None = None) -> Path:
    """Write an ``.npz`` checkpoint; reload is bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "d_s": params.d_s,
        "d_a": params.d_a,
        "n_bins": params.n_bins,
        "seed": params.seed,
        "n_layers": len(params.weights),
        "step": int(step),
        "meta": meta or {},
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    if opt is not None:
        header["optimizer"] = {
            "step": opt.step,
            "lr": opt.lr,
            "total_steps": opt.total_steps,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
        }
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"m{i}"] = m
            arrays[f"v{i}"] = v
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[PolicyParams, OptimizerState | None, int, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataValidationError(f"unsupported checkpoint version {header.get('version')}")
        n = header["n_layers"]
        weights = [z[f"W{i}"].copy() for i in range(n)]
        biases = [z[f"b{i}"].copy() for i in range(n)]
        params = PolicyParams(weights, biases, header["d_s"], header["d_a"], header["n_bins"], header["seed"])
        opt = None
        if "optimizer" in header:
            o = header["optimizer"]
            opt = OptimizerState(
                m=[z[f"m{i}"].copy() for i in range(2 * n)],
                v=[z[f"v{i}"].copy() for i in range(2 * n)],
                step=o["step"],
                lr=o["lr"],
                total_steps=o["total_steps"],
                beta1=o["beta1"],
                beta2=o["beta2"],
                eps=o["eps"],
            )
    return params, opt, header["step"], header["meta"]


# ------------------------------------------------------------------ estimator


class DiscreteBCPolicy(ClassifierMixin, BaseEstimator):
    """Behavior-cloning classifier over binned actions.

    ``fit(X, y)`` takes states ``(n, d_s)`` and integer bins ``(n, d_a)``;
    ``sample_weight`` gives per-example weights for the NLL.
    """

    def __init__(
        self,
        n_bins: int = 256,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        lr: float = DEFAULT_LR,
        n_steps: int = 1000,
        batch_size: int = 256,
        random_state: int = 0,
    ):
        self.n_bins = n_bins
        self.hidden = hidden
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X = check_finite_array(X, "X", ndim=2)
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[:, None]
        y = check_bins(y, y.shape[1], self.n_bins, "y")
        w = np.ones(X.shape[0]) if sample_weight is None else check_finite_array(sample_weight, "sample_weight", ndim=1)
        self.params_ = init_policy(X.shape[1], y.shape[1], self.n_bins, tuple(self.hidden), self.random_state)
        opt = init_optimizer(self.params_, self.lr, self.n_steps)
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = rng.integers(0, X.shape[0], size=min(self.batch_size, X.shape[0]))
            grads, loss = grad_nll(self.params_, X[idx], y[idx], w[idx])
            adam_step(self.params_, opt, grads)
            self.loss_curve_.append(loss)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(self.n_bins)
        return self

    def predict_log_proba(self, X):
        check_is_fitted(self, "params_")
        logits, _ = forward(self.params_, check_finite_array(X, "X", ndim=2))
        return log_softmax(logits)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        return self.predict_log_proba(X).argmax(axis=-1)

    def score(self, X, y, sample_weight=None):
        """Negative weighted mean NLL (higher is better)."""
        check_is_fitted(self, "params_")
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[:, None]
        losses = nll(self.params_, X, y)
        w = np.ones(losses.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        return -float(w @ losses / w.sum())
