"""Pairwise social-relation recognition on a from-scratch autograd stack."""

from .backbone import PersonBox, SEGate, Stem, gap, roi_pool
from .data import (
    AnnotatedImage,
    compute_stats,
    generate_synthetic,
    load_annotations,
    save_annotations,
)
from .errors import (
    ConfigError,
    DataError,
    GraphTooSmallError,
    NumericError,
    RgnetError,
    ShapeError,
)
from .graph import GraphQueryModule, GQMLayer, edge_update, extract_queries, vertex_update
from .loss import ClassWeights, build_mask, compute_class_weights, weighted_bce
from .metrics import EvalRecord, average_precision, mean_average_precision, per_class_recall
from .pipeline import (
    ModelConfig,
    RelationModel,
    TrainState,
    evaluate,
    fake_quant_train,
    init_train_state,
    load_train_state,
    run_ablation,
    save_train_state,
    train,
)
from .quantize import (
    ActivationObserver,
    QuantContext,
    QuantScheme,
    dequantize,
    fake_quant,
    quantize,
)
from .tensor import Tensor, concat, no_grad
from .transformer import LogitCube, ReasoningModule, symmetrize_scores

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "ActivationObserver", "ClassWeights", "ConfigError",
    "DataError", "EvalRecord", "GQMLayer", "GraphQueryModule",
    "GraphTooSmallError", "LogitCube", "ModelConfig", "NumericError",
    "PersonBox", "QuantContext", "QuantScheme", "ReasoningModule",
    "RelationModel", "RgnetError", "SEGate", "ShapeError", "Stem",
    "Tensor", "TrainState", "average_precision", "build_mask",
    "compute_class_weights", "compute_stats", "concat", "dequantize",
    "edge_update", "evaluate", "extract_queries", "fake_quant",
    "fake_quant_train", "gap", "generate_synthetic", "init_train_state",
    "load_annotations", "load_train_state", "mean_average_precision",
    "no_grad", "per_class_recall", "quantize", "roi_pool", "run_ablation",
    "save_annotations", "save_train_state", "symmetrize_scores", "train",
    "vertex_update", "weighted_bce",
]
