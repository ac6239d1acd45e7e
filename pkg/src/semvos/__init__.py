"""Desk-scale video object segmentation engine.

A small, fully self-verifying VOS stack: a float64 autograd core, a
ViT + CNN-pyramid encoder, semantic-token and deformable-attention
feature fusion, a key/value frame memory with an interval update
policy, discriminative per-object target queries, a convolutional mask
decoder, J&F evaluation, and a synthetic-video training/inference
pipeline behind a CLI.
"""

from .config import EngineConfig
from .engine import RunState, SequenceManifest, run_sequence
from .errors import (ConfigError, DataError, DimensionError, NumericalError,
                     StateError)
from .gradcheck import finite_diff_check
from .metrics import EvalReport, boundary_f, evaluate_sequence, jaccard
from .synthetic import SyntheticSpec, gen_synthetic
from .tensor import Tensor, concat, no_grad, stack
from .training import TrainHyper, train
from .weights import ModelWeights

__all__ = [
    "EngineConfig", "ModelWeights", "Tensor", "concat", "stack", "no_grad",
    "SequenceManifest", "RunState", "run_sequence",
    "SyntheticSpec", "gen_synthetic",
    "TrainHyper", "train",
    "EvalReport", "evaluate_sequence", "jaccard", "boundary_f",
    "finite_diff_check",
    "ConfigError", "DataError", "DimensionError", "NumericalError", "StateError",
]

__version__ = "0.1.0"
