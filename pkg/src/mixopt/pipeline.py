"""End-to-end orchestration: preprocess, reference, checkpoint selection, DRO, subset, report.

Every stage writes its outputs under ``out_dir/<stage>/`` together with a
``stage.json`` marker holding the preprocessing hash and the stage's own
settings. A re-run reuses any stage whose marker matches and recomputes the
rest, so an interrupted run resumes with identical results.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import SplitSpec, dataset_digest, load_manifest, split_domains
from .dro import DROConfig, MixtureWeights, read_alpha_trace_csv, run_dro, write_alpha_trace_csv
from .exceptions import DataValidationError, HashMismatchError, NumericalError
from .policy import DEFAULT_LR, load_checkpoint
from .preprocess import DEFAULT_BINS, DEFAULT_CLIP, SCHEMES, EncodedDomain, preprocess_domains, save_norm_stats
from .reference import (
    TrainConfig,
    read_records_csv,
    select_checkpoint,
    train_reference,
    uniform_weights,
    write_records_csv,
)
from .report import export_trace, render_weight_table, write_weights_json
from .subset import compute_retention, materialize_subset

log = logging.getLogger(__name__)

STAGE_FILE = "stage.json"
RUN_FILE = "run.json"
WEIGHTS_FILE = "weights.json"


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(obj: Any) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def preprocess_hash(
    scheme: str,
    n_bins: int,
    clip_range: float,
    val_fraction: float,
    split_seed: int,
    data_digest: str | None = None,
) -> str:
    """Content hash of everything that determines the encoded training data."""
    return _sha(
        {
            "scheme": scheme,
            "n_bins": int(n_bins),
            "clip_range": float(clip_range),
            "val_fraction": float(val_fraction),
            "split_seed": int(split_seed),
            "data": data_digest,
        }
    )[:16]


def check_hash(expected: str, found: str | None, what: str) -> None:
    if found != expected:
        raise HashMismatchError(
            f"{what} was produced with preprocessing hash {found!r}, current settings hash to {expected!r}"
        )


@dataclass
class PreparedData:
    names: list[str]
    train: list[EncodedDomain]
    val: list[EncodedDomain]
    stats: list
    disc: Any
    config_hash: str


def prepare_data(
    data: str | Path,
    scheme: str = "gaussian",
    n_bins: int = DEFAULT_BINS,
    clip_range: float = DEFAULT_CLIP,
    val_fraction: float = 0.05,
    seed: int = 0,
) -> PreparedData:
    """Load, split and encode a dataset; stats are fit per domain on its train split."""
    if scheme not in SCHEMES:
        raise DataValidationError(f"unknown normalization scheme {scheme!r}")
    _, domains = load_manifest(data)
    train, val = split_domains(domains, SplitSpec(val_fraction, seed))
    enc_train, enc_val, stats, disc = preprocess_domains(train, val, scheme, n_bins, clip_range)
    h = preprocess_hash(scheme, n_bins, clip_range, val_fraction, seed, dataset_digest(data))
    return PreparedData([d.name for d in domains], enc_train, enc_val, stats, disc, h)


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class PipelineConfig:
    data: str
    out_dir: str
    scheme: str = "gaussian"
    n_bins: int = DEFAULT_BINS
    clip_range: float = DEFAULT_CLIP
    val_fraction: float = 0.05
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    dro: DROConfig = field(default_factory=DROConfig)
    dro_steps: int | None = None  # None: the selected reference step
    subset_fraction: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DataValidationError(f"unknown normalization scheme {self.scheme!r}")
        if self.n_bins < 2 or not self.clip_range > 0:
            raise DataValidationError("need n_bins >= 2 and clip_range > 0")
        if self.dro_steps is not None and self.dro_steps < 1:
            raise DataValidationError("dro_steps must be positive")
        if self.subset_fraction is not None and not 0 < self.subset_fraction <= 1:
            raise DataValidationError("subset_fraction must lie in (0, 1]")
        # one seed drives every stage; the DRO policy shares the reference architecture
        object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        object.__setattr__(
            self, "dro", dataclasses.replace(self.dro, seed=self.seed, hidden=self.train.hidden)
        )

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"]["hidden"] = list(self.train.hidden)
        out["dro"]["hidden"] = list(self.dro.hidden)
        del out["dro"]["total_steps"]
        return out

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path | None = None) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise DataValidationError("pipeline config must be a JSON object")
        obj = dict(obj)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        for key in ("data", "out_dir"):
            if key not in obj:
                raise DataValidationError(f"pipeline config is missing {key!r}")
            if base_dir is not None and not Path(obj[key]).is_absolute():
                obj[key] = str(Path(base_dir) / obj[key])
        train = dict(obj.pop("train", {}) or {})
        dro = dict(obj.pop("dro", {}) or {})
        if "total_steps" in dro:
            raise DataValidationError("set the DRO step budget with top-level 'dro_steps'")
        dro.setdefault("lr", train.get("lr", DEFAULT_LR))
        try:
            return cls(train=TrainConfig(**train), dro=DROConfig(**dro), **obj)
        except TypeError as exc:
            raise DataValidationError(f"invalid pipeline config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataValidationError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj, path.parent)


# ---------------------------------------------------------------------- stages


def _read_marker(stage_dir: Path) -> dict | None:
    p = stage_dir / STAGE_FILE
    if not p.is_file():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _write_marker(stage_dir: Path, payload: dict) -> None:
    (stage_dir / STAGE_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _reusable(stage_dir: Path, config_hash: str, settings: dict) -> dict | None:
    marker = _read_marker(stage_dir)
    if marker is None:
        return None
    check_hash(config_hash, marker.get("config_hash"), f"stage {stage_dir.name!r}")
    if marker.get("settings") != json.loads(_canonical(settings)):
        log.info("stage %s settings changed; recomputing", stage_dir.name)
        return None
    return marker


@dataclass
class PipelineResult:
    weights: MixtureWeights
    names: list[str]
    selected_step: int
    dro_steps: int
    config_hash: str
    out_dir: Path
    records: list = field(default_factory=list, repr=False)
    trace: Any = field(default=None, repr=False)
    retention: Any = None


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run all stages, reusing completed ones found under ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare_data(config.data, config.scheme, config.n_bins, config.clip_range, config.val_fraction, config.seed)
    h = prep.config_hash
    names = prep.names

    # stage 1: normalization statistics
    pre_dir = out / "preprocess"
    pre_dir.mkdir(exist_ok=True)
    marker = _read_marker(pre_dir)
    if marker is not None:
        check_hash(h, marker.get("config_hash"), "stage 'preprocess'")
    save_norm_stats(prep.stats, names, pre_dir / "norm_stats.json")
    _write_marker(pre_dir, {"stage": "preprocess", "config_hash": h, "settings": {}})

    # stage 2: reference training
    ref_dir = out / "reference"
    ref_settings = {"train": dataclasses.asdict(config.train)}
    ref_settings["train"]["hidden"] = list(config.train.hidden)
    if _reusable(ref_dir, h, ref_settings) is not None:
        records = read_records_csv(ref_dir / "records.csv", names)
        log.info("reusing reference stage (%d records)", len(records))
    else:
        ref_dir.mkdir(exist_ok=True)
        try:
            records = train_reference(
                prep.train, prep.val, config.train, config.n_bins,
                checkpoint_dir=ref_dir / "checkpoints", meta={"config_hash": h},
            )
        except NumericalError as exc:
            write_records_csv(getattr(exc, "records", []), names, ref_dir / "records.csv")
            raise
        write_records_csv(records, names, ref_dir / "records.csv")
        _write_marker(ref_dir, {"stage": "reference", "config_hash": h, "settings": ref_settings})

    # stage 3: checkpoint selection
    selected = select_checkpoint(records, config.train.delta)
    ckpt = ref_dir / "checkpoints" / f"step_{selected:08d}.npz"
    ref_params, _, _, meta = load_checkpoint(ckpt)
    check_hash(h, meta.get("config_hash"), f"reference checkpoint {ckpt.name}")

    # stage 4: DRO
    dro_steps = config.dro_steps if config.dro_steps is not None else selected
    dro_cfg = dataclasses.replace(config.dro, total_steps=dro_steps)
    dro_dir = out / "dro"
    dro_settings = {"dro": dataclasses.asdict(dro_cfg), "selected_step": selected}
    dro_settings["dro"]["hidden"] = list(dro_cfg.hidden)
    if _reusable(dro_dir, h, dro_settings) is not None and (out / WEIGHTS_FILE).is_file():
        trace, _ = read_alpha_trace_csv(dro_dir / "alpha_trace.csv")
        w = json.loads((out / WEIGHTS_FILE).read_text(encoding="utf-8"))
        weights = MixtureWeights(np.array([w[n] for n in names]), "dro_averaged")
    else:
        dro_dir.mkdir(exist_ok=True)
        trace, weights = run_dro(prep.train, ref_params, dro_cfg)
        write_alpha_trace_csv(trace, names, dro_dir / "alpha_trace.csv")
        write_weights_json(weights, names, out / WEIGHTS_FILE)
        _write_marker(dro_dir, {"stage": "dro", "config_hash": h, "settings": dro_settings})

    # stage 5: optional subset of the full (unsplit) dataset
    plan = None
    if config.subset_fraction is not None:
        _, domains = load_manifest(config.data)
        plan = compute_retention(np.array([d.size for d in domains]), weights.alpha, config.subset_fraction)
        materialize_subset(domains, plan, config.seed, out / "subset")
        _stamp_json(out / "subset" / "retention_plan.json", h)

    # stage 6: report
    rep_dir = out / "report"
    rep_dir.mkdir(exist_ok=True)
    base = MixtureWeights(uniform_weights([d.size for d in prep.train]), "uniform")
    text, csv_text = render_weight_table([base, weights], ["uniform", "dro"], names)
    (rep_dir / "weights_table.txt").write_text(text, encoding="utf-8")
    (rep_dir / "weights_table.csv").write_text(csv_text, encoding="utf-8")
    export_trace(trace, records, rep_dir, names)
    _stamp_json(rep_dir / "export.json", h)

    run = {
        "config": config.to_json(),
        "config_hash": h,
        "data_digest": dataset_digest(config.data),
        "domains": names,
        "selected_step": selected,
        "dro_steps": dro_steps,
        "reference_checkpoint": str(ckpt.relative_to(out)),
        "weights": weights.as_dict(names),
    }
    (out / RUN_FILE).write_text(json.dumps(run, indent=2) + "\n", encoding="utf-8")
    return PipelineResult(weights, names, selected, dro_steps, h, out, records, trace, plan)


def _stamp_json(path: Path, config_hash: str) -> None:
    obj = json.loads(path.read_text(encoding="utf-8"))
    obj["config_hash"] = config_hash
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
