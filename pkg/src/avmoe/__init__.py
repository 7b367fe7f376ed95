"""Desk-scale audiovisual speech recognition with a sparse MoE encoder."""

from .errors import (
    AvmoeError,
    CheckpointError,
    ConfigError,
    CtcInfeasibleError,
    DataError,
    DimensionError,
    GraphError,
    IngestError,
    NumericError,
    ScoringError,
)
from .model import Model, ModelConfig, moe_model_from_dense
from .moe import LoadStats, MoEConfig, MoELayer, RoutingDecision, init_from_dense
from .tensor import Tensor, no_grad

__all__ = [
    "AvmoeError",
    "CheckpointError",
    "ConfigError",
    "CtcInfeasibleError",
    "DataError",
    "DimensionError",
    "GraphError",
    "IngestError",
    "LoadStats",
    "MoEConfig",
    "MoELayer",
    "Model",
    "ModelConfig",
    "NumericError",
    "RoutingDecision",
    "ScoringError",
    "Tensor",
    "init_from_dense",
    "moe_model_from_dense",
    "no_grad",
]
