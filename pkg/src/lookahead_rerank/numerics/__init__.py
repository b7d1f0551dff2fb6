from .autograd import (
    ShapeError,
    Tensor,
    backward,
    forward_op,
    topological_order,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckError, grad_check
from .params import NonFiniteGradientError, ParameterSet, adam_step

__all__ = [
    "CheckpointError",
    "GradCheckError",
    "NonFiniteGradientError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "forward_op",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "topological_order",
]
