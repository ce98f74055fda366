"""Reverse-mode autodiff and the layer primitives used by the estimator and detector."""

from . import ops
from .grad import input_gradient, numerical_gradient, relative_error
from .optim import Adadelta, Adam, Triangular2
from .tensor import (
    ContractError,
    DimensionError,
    ParameterError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    set_default_dtype,
)

__all__ = [
    "Adadelta",
    "Adam",
    "ContractError",
    "DimensionError",
    "ParameterError",
    "Tape",
    "Tensor",
    "Triangular2",
    "as_tensor",
    "backward",
    "get_default_dtype",
    "input_gradient",
    "numerical_gradient",
    "ops",
    "relative_error",
    "set_default_dtype",
]
