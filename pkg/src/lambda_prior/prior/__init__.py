from .checkpoint import TrainState, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .model import (
    Batch,
    PriorConfig,
    PriorInputError,
    PriorParams,
    collate,
    forward,
    init_params,
    param_count,
    param_shapes,
    predict,
)

__all__ = [
    "Batch",
    "PriorConfig",
    "PriorInputError",
    "PriorParams",
    "TrainState",
    "checkpoint_bytes",
    "collate",
    "forward",
    "init_params",
    "load_checkpoint",
    "param_count",
    "param_shapes",
    "parse_checkpoint",
    "predict",
    "save_checkpoint",
]
