"""Trajectory/domain data model, on-disk format, splitting and synthetic suites.

On disk a dataset is a directory holding ``manifest.json`` plus one JSON-lines
file per domain, one trajectory per line::

    {"states": [[...], ...], "actions": [[...], ...]}
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataValidationError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
SYNTHETIC_KINDS = ("noise_pair", "operator_tiers", "multimodal")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = _frozen(self.states)
        actions = _frozen(self.actions)
        if states.ndim != 2 or actions.ndim != 2:
            raise DataValidationError("states and actions must be 2-D (T, dim)")
        if states.shape[0] != actions.shape[0]:
            raise DataValidationError(
                f"states/actions length mismatch: {states.shape[0]} vs {actions.shape[0]}"
            )
        if states.shape[0] < 1:
            raise DataValidationError("trajectory must contain at least one step")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise DataValidationError("trajectory contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.states, other.states) and np.array_equal(
            self.actions, other.actions
        )

    __hash__ = None


@dataclass(frozen=True)
class Domain:
    id: int
    name: str
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if trajs:
            d_s, d_a = trajs[0].d_s, trajs[0].d_a
            for i, t in enumerate(trajs):
                if t.d_s != d_s or t.d_a != d_a:
                    raise DataValidationError(
                        f"domain {self.name!r} trajectory {i}: dims ({t.d_s}, {t.d_a}) "
                        f"differ from ({d_s}, {d_a})"
                    )

    @property
    def size(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def d_s(self) -> int:
        return self.trajectories[0].d_s

    @property
    def d_a(self) -> int:
        return self.trajectories[0].d_a

    def states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories], axis=0)

    def actions(self) -> np.ndarray:
        return np.concatenate([t.actions for t in self.trajectories], axis=0)


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: str
    d_s: int
    d_a: int
    n_trajectories: int


@dataclass(frozen=True)
class Manifest:
    domains: tuple[ManifestEntry, ...]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise DataValidationError(f"duplicate domain names in manifest: {names}")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "domains": [
                {
                    "name": d.name,
                    "path": d.path,
                    "d_s": d.d_s,
                    "d_a": d.d_a,
                    "n_trajectories": d.n_trajectories,
                }
                for d in self.domains
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        try:
            version = int(obj["version"])
            entries = [
                ManifestEntry(
                    name=str(d["name"]),
                    path=str(d["path"]),
                    d_s=int(d["d_s"]),
                    d_a=int(d["d_a"]),
                    n_trajectories=int(d["n_trajectories"]),
                )
                for d in obj["domains"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"malformed manifest: {exc}") from exc
        if version != FORMAT_VERSION:
            raise DataValidationError(f"unsupported manifest version {version}")
        return cls(domains=tuple(entries), version=version)


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise DataValidationError("val_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise DataValidationError("split seed must be non-negative")


# --------------------------------------------------------------------------- I/O


def _trajectory_line(t: Trajectory) -> str:
    # json emits repr() for floats, which round-trips exactly.
    return json.dumps({"states": t.states.tolist(), "actions": t.actions.tolist()})


def _domain_filename(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    return f"{safe}.jsonl"


def save_dataset(domains: Sequence[Domain], out_dir: str | os.PathLike) -> Manifest:
    """Write domains as ``manifest.json`` + one JSON-lines file per domain."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in domains:
        if d.n_trajectories == 0:
            raise DataValidationError(f"domain {d.name!r} has no trajectories")
        rel = _domain_filename(d.name)
        with open(out / rel, "w", encoding="utf-8", newline="\n") as fh:
            for t in d.trajectories:
                fh.write(_trajectory_line(t))
                fh.write("\n")
        entries.append(ManifestEntry(d.name, rel, d.d_s, d.d_a, d.n_trajectories))
    manifest = Manifest(domains=tuple(entries))
    with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_json(), fh, indent=2)
        fh.write("\n")
    return manifest


def _manifest_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise DataValidationError(f"manifest not found: {p}")
    return p


def load_manifest(path: str | os.PathLike) -> tuple[Manifest, list[Domain]]:
    """Load a dataset directory (or its manifest file) and validate it."""
    mpath = _manifest_path(path)
    with open(mpath, encoding="utf-8") as fh:
        try:
            manifest = Manifest.from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{mpath}: invalid JSON: {exc}") from exc

    domains = []
    for idx, entry in enumerate(manifest.domains):
        fpath = mpath.parent / entry.path
        if not fpath.is_file():
            raise DataValidationError(f"domain {entry.name!r}: missing file {fpath}")
        trajs = []
        with open(fpath, encoding="utf-8") as fh:
            for t_idx, line in enumerate(fh):
                if not line.strip():
                    continue
                where = f"domain {entry.name!r} trajectory {t_idx}"
                try:
                    rec = json.loads(line)
                    states = np.asarray(rec["states"], dtype=np.float64)
                    actions = np.asarray(rec["actions"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataValidationError(f"{where}: malformed record: {exc}") from exc
                if states.ndim != 2 or states.shape[1] != entry.d_s:
                    raise DataValidationError(
                        f"{where}: state dimension mismatch, manifest d_s={entry.d_s}, "
                        f"file shape {states.shape}"
                    )
                if actions.ndim != 2 or actions.shape[1] != entry.d_a:
                    raise DataValidationError(
                        f"{where}: action dimension mismatch, manifest d_a={entry.d_a}, "
                        f"file shape {actions.shape}"
                    )
                if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
                    raise DataValidationError(f"{where}: non-finite value")
                try:
                    trajs.append(Trajectory(states, actions))
                except DataValidationError as exc:
                    raise DataValidationError(f"{where}: {exc}") from exc
        if len(trajs) != entry.n_trajectories:
            raise DataValidationError(
                f"domain {entry.name!r}: manifest declares {entry.n_trajectories} "
                f"trajectories, file contains {len(trajs)}"
            )
        domains.append(Domain(id=idx, name=entry.name, trajectories=tuple(trajs)))
    return manifest, domains


def dataset_digest(path: str | os.PathLike) -> str:
    """sha256 over the manifest and every domain file, in manifest order."""
    import hashlib

    mpath = _manifest_path(path)
    h = hashlib.sha256(mpath.read_bytes())
    with open(mpath, encoding="utf-8") as fh:
        manifest = Manifest.from_json(json.load(fh))
    for entry in manifest.domains:
        h.update((mpath.parent / entry.path).read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------- splitting


def split_train_val(domain: Domain, spec: SplitSpec) -> tuple[Domain, Domain]:
    """Hold out whole trajectories: ``ceil(fraction * n)`` (at least one) go to validation."""
    n = domain.n_trajectories
    if n < 2:
        raise DataValidationError(
            f"domain {domain.name!r} has {n} trajectory; at least 2 are needed to hold out"
        )
    # Small epsilon keeps e.g. 0.05 * 20 from landing just above an integer.
    n_val = max(1, math.ceil(spec.val_fraction * n - 1e-9))
    n_val = min(n_val, n - 1)
    rng = np.random.default_rng([spec.seed, domain.id])
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    train = Domain(domain.id, domain.name, tuple(domain.trajectories[i] for i in train_idx))
    val = Domain(domain.id, domain.name, tuple(domain.trajectories[i] for i in val_idx))
    return train, val


def split_domains(domains: Sequence[Domain], spec: SplitSpec) -> tuple[list[Domain], list[Domain]]:
    pairs = [split_train_val(d, spec) for d in domains]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# -------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class ActionMap:
    """Fixed smooth state->action map: ``scale * tanh(tanh(s W1 + b1) W2)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    scale: float = 1.0

    def __call__(self, states: np.ndarray) -> np.ndarray:
        h = np.tanh(states @ self.w1 + self.b1)
        return self.scale * np.tanh(h @ self.w2)


def suite_action_map(seed: int, d_s: int, d_a: int, scale: float = 1.0, width: int = 32) -> ActionMap:
    """The shared map used by the synthetic generators for ``seed``."""
    rng = np.random.default_rng([seed, 0x5EED])
    w1 = rng.normal(size=(d_s, width)) * (1.5 / math.sqrt(d_s))
    b1 = rng.normal(size=width) * 0.3
    w2 = rng.normal(size=(width, d_a)) * (1.5 / math.sqrt(width))
    return ActionMap(w1, b1, w2, scale)


def _state_process(rng: np.random.Generator, n_traj: int, horizon: int, d_s: int) -> list[np.ndarray]:
    """Stationary AR(1) feature trajectories."""
    phi, sigma = 0.9, 0.45
    stat_std = sigma / math.sqrt(1 - phi**2)
    out = []
    for _ in range(n_traj):
        s = np.empty((horizon, d_s))
        s[0] = rng.normal(size=d_s) * stat_std
        eps = rng.normal(size=(horizon - 1, d_s)) * sigma
        for t in range(1, horizon):
            s[t] = phi * s[t - 1] + eps[t - 1]
        out.append(s)
    return out


# Tier -> additive action-noise std, in units of the shared map's output.
OPERATOR_TIER_NOISE = {"better": 0.02, "okay": 0.1, "worse": 0.3}

# noise_pair learnable-domain settings: small raw action scale, rare large outliers.
NOISE_PAIR_SCALE = 0.1
NOISE_PAIR_JITTER = 0.004
NOISE_PAIR_OUTLIER_RATE = 0.002
NOISE_PAIR_OUTLIER_SCALE = 10.0
# noise-domain states come from the same process, offset so the domains are distinguishable
NOISE_PAIR_STATE_SHIFT = 3.0


def _as_sizes(sizes, k: int) -> list[int]:
    if isinstance(sizes, (int, np.integer)):
        sizes = [int(sizes)] * k
    sizes = [int(s) for s in sizes]
    if len(sizes) != k:
        raise DataValidationError(f"expected {k} sizes, got {len(sizes)}")
    if any(s < 1 for s in sizes):
        raise DataValidationError("sizes must be positive")
    return sizes


def generate_synthetic_suite(
    kind: str,
    seed: int = 0,
    sizes: int | Sequence[int] | None = None,
    *,
    horizon: int = 50,
    d_s: int = 8,
    d_a: int = 4,
) -> list[Domain]:
    """Build a synthetic multi-domain dataset.

    ``sizes`` counts trajectories per domain (scalar or one per domain); each
    trajectory has ``horizon`` steps. The result is a pure function of the
    arguments.

    * ``noise_pair``: ``learnable`` has small-magnitude actions given by a
      smooth function of the state (plus jitter and sparse outliers);
      ``noise`` uses the same state process shifted by a constant and has
      i.i.d. standard normal actions.
    * ``operator_tiers``: six domains sharing one map, with additive action
      noise at three levels (``better``/``okay``/``worse``, two domains each).
    * ``multimodal``: one domain whose actions sit at one of two well-separated
      offsets from the map, and a unimodal control.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataValidationError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if horizon < 1 or d_s < 1 or d_a < 1:
        raise DataValidationError("horizon, d_s and d_a must be positive")
    rng = np.random.default_rng([seed, SYNTHETIC_KINDS.index(kind)])

    if kind == "noise_pair":
        sizes = _as_sizes(200 if sizes is None else sizes, 2)
        fmap = suite_action_map(seed, d_s, d_a, scale=NOISE_PAIR_SCALE)
        learn, noise = [], []
        for s in _state_process(rng, sizes[0], horizon, d_s):
            a = fmap(s) + rng.normal(size=(horizon, d_a)) * NOISE_PAIR_JITTER
            outlier = rng.random(size=(horizon, d_a)) < NOISE_PAIR_OUTLIER_RATE
            a = np.where(outlier, rng.uniform(-1, 1, size=a.shape) * NOISE_PAIR_OUTLIER_SCALE, a)
            learn.append(Trajectory(s, a))
        for s in _state_process(rng, sizes[1], horizon, d_s):
            noise.append(Trajectory(s + NOISE_PAIR_STATE_SHIFT, rng.normal(size=(horizon, d_a))))
        return [Domain(0, "learnable", tuple(learn)), Domain(1, "noise", tuple(noise))]

    if kind == "operator_tiers":
        names = ["better_1", "better_2", "okay_1", "okay_2", "worse_1", "worse_2"]
        sizes = _as_sizes(60 if sizes is None else sizes, len(names))
        fmap = suite_action_map(seed, d_s, d_a)
        domains = []
        for i, (name, n) in enumerate(zip(names, sizes)):
            sigma = OPERATOR_TIER_NOISE[name.split("_")[0]]
            trajs = []
            for s in _state_process(rng, n, horizon, d_s):
                trajs.append(Trajectory(s, fmap(s) + rng.normal(size=(horizon, d_a)) * sigma))
            domains.append(Domain(i, name, tuple(trajs)))
        return domains

    sizes = _as_sizes(100 if sizes is None else sizes, 2)
    fmap = suite_action_map(seed, d_s, d_a)
    multi, uni = [], []
    for s in _state_process(rng, sizes[0], horizon, d_s):
        mode = rng.choice([-1.0, 1.0], size=(horizon, 1))
        a = fmap(s) + 2.0 * mode + rng.normal(size=(horizon, d_a)) * 0.05
        multi.append(Trajectory(s, a))
    for s in _state_process(rng, sizes[1], horizon, d_s):
        uni.append(Trajectory(s, fmap(s) + rng.normal(size=(horizon, d_a)) * 0.05))
    return [Domain(0, "multimodal", tuple(multi)), Domain(1, "unimodal", tuple(uni))]


def truncate_domain(domain: Domain, n_trajectories: int) -> Domain:
    """Keep the first ``n_trajectories`` trajectories (for shrunken-domain scenarios)."""
    return Domain(domain.id, domain.name, domain.trajectories[:n_trajectories])
