"""Small reverse-mode numerical core: tensors, a recording tape, primitives, optimizers."""
from .checkpoint import CheckpointError, load, save
from .ops import (PRIMITIVES, add, bce, bce_with_logits, concat, conv2d, forward_primitive, hinge,
                  max_pool2d, mean, mul, relu, scale, sigmoid, stable_sigmoid, total, upsample2x)
from .optim import MissingGradError, OptimizerState, adam, optimizer_step, sgd
from .tensor import ShapeError, Tape, TapeError, Tensor, backward

__all__ = [
    "Tensor", "Tape", "backward", "ShapeError", "TapeError", "forward_primitive", "PRIMITIVES",
    "conv2d", "max_pool2d", "upsample2x", "concat", "relu", "sigmoid", "stable_sigmoid", "bce",
    "bce_with_logits", "hinge", "mean", "total", "add", "mul", "scale",
    "OptimizerState", "sgd", "adam", "optimizer_step", "MissingGradError",
    "save", "load", "CheckpointError",
]
