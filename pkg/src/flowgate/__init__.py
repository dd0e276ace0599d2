"""Flow-based anomaly detection from a normal-only and a mixture density model.

Two normalizing flows are trained: ``m0`` on normal images and ``m1`` on an
unlabeled mixture. The normality score of an image is
``log p(x|normal) - log p(x)``, the log-posterior of the normal class up to a
constant.
"""

__version__ = "0.1.0"

from .data import SynthCounts, SynthSpec, clip_window, dequantize, load_dataset, read_manifest
from .engine import GradientTape, Tensor, backward
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    DimensionError,
    EvaluationError,
    FlowgateError,
    NumericError,
    SingularMatrixError,
)
from .evaluation import RocCurve, auc, roc, youden_cutoff
from .model import FlowModel, build_glow, load, save
from .presets import PRESETS, get_preset
from .scoring import DualScorer, ScoreRecord, likelihood_score, posterior_score
from .trainer import TrainConfig, train

__all__ = [
    "CheckpointError", "ContractError", "DataError", "DimensionError", "DualScorer",
    "EvaluationError", "FlowModel", "FlowgateError", "GradientTape", "NumericError",
    "PRESETS", "RocCurve", "ScoreRecord", "SingularMatrixError", "SynthCounts", "SynthSpec",
    "Tensor", "TrainConfig", "auc", "backward", "build_glow", "clip_window", "dequantize",
    "get_preset", "likelihood_score", "load", "load_dataset", "posterior_score",
    "read_manifest", "roc", "save", "train", "youden_cutoff",
]
