"""Temporal forgery localisation with dual-stream graph learning and trace disentanglement."""
from .config import ConfigError, EvalParams, LossWeights, ModelConfig, RunConfig, TrainConfig
from .data import (
    DatasetManifest,
    FeatureFormatError,
    FeatureSequence,
    SynthesisSpec,
    read_features,
    synthesize_dataset,
    synthesize_split,
    write_features,
)
from .evaluation import EvalReport, Segment, average_precision, evaluate_probs, extract_segments, tiou
from .gradcheck import GradCheckReport, finite_diff_check
from .model import Batch, DDNet
from .tensor import NumericalError, Tensor
from .training import Checkpoint, TrainingError, evaluate_model, gradcheck_groups, model_from_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "Checkpoint", "ConfigError", "DDNet", "DatasetManifest", "EvalParams", "EvalReport",
    "FeatureFormatError", "FeatureSequence", "GradCheckReport", "LossWeights", "ModelConfig",
    "NumericalError", "RunConfig", "Segment", "SynthesisSpec", "Tensor", "TrainConfig", "TrainingError",
    "average_precision", "evaluate_model", "evaluate_probs", "extract_segments", "finite_diff_check",
    "gradcheck_groups", "model_from_checkpoint", "read_features", "synthesize_dataset", "synthesize_split",
    "tiou", "train", "write_features",
]
