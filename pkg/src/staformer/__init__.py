"""Short-term object-interaction anticipation at desk scale."""

from .config import PipelineConfig, ablation_config, load_config
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    IncompatibleCheckpointError,
    NumericError,
    StaformerError,
    ValidationError,
)
from .evaluator import evaluate
from .pipeline import STAformer, run_pipeline, train_toy
from .synthetic import DatasetSpec, generate_dataset

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DatasetSpec",
    "DimensionError",
    "IncompatibleCheckpointError",
    "NumericError",
    "PipelineConfig",
    "STAformer",
    "StaformerError",
    "ValidationError",
    "ablation_config",
    "evaluate",
    "generate_dataset",
    "load_config",
    "run_pipeline",
    "train_toy",
]
