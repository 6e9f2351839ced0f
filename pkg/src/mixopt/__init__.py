"""Domain mixture optimization for heterogeneous imitation-learning datasets."""
from .dataset import (
    Domain,
    Manifest,
    SplitSpec,
    Trajectory,
    generate_synthetic_suite,
    load_manifest,
    save_dataset,
    split_domains,
)
from .dro import DROConfig, DROTrace, MixtureWeights, run_dro, update_alpha
from .exceptions import DataValidationError, HashMismatchError, MixoptError, NumericalError
from .pipeline import PipelineConfig, run_pipeline
from .policy import DiscreteBCPolicy, init_policy, nll
from .preprocess import ActionDiscretizer, ActionNormalizer, fit_discretizer, fit_normalizer
from .reference import CheckpointRecord, TrainConfig, select_checkpoint, train_reference
from .report import export_trace, render_weight_table
from .subset import MixtureSubsampler, compute_retention, retention_oracle

__version__ = "0.1.0"

__all__ = [
    "ActionDiscretizer",
    "ActionNormalizer",
    "CheckpointRecord",
    "DROConfig",
    "DROTrace",
    "DataValidationError",
    "DiscreteBCPolicy",
    "Domain",
    "HashMismatchError",
    "Manifest",
    "MixoptError",
    "MixtureSubsampler",
    "MixtureWeights",
    "NumericalError",
    "PipelineConfig",
    "SplitSpec",
    "TrainConfig",
    "Trajectory",
    "compute_retention",
    "export_trace",
    "fit_discretizer",
    "fit_normalizer",
    "generate_synthetic_suite",
    "init_policy",
    "load_manifest",
    "nll",
    "render_weight_table",
    "retention_oracle",
    "run_dro",
    "run_pipeline",
    "save_dataset",
    "select_checkpoint",
    "split_domains",
    "train_reference",
    "update_alpha",
]
