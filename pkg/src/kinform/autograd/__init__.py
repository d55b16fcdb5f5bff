"""Minimal dense tensors with a reverse-mode gradient tape."""

from . import ops
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .serialize import FormatError, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    get_default_dtype,
    set_default_dtype,
)

__all__ = [
    "FormatError",
    "GradCheckError",
    "GradCheckReport",
    "NumericError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "backward",
    "get_default_dtype",
    "grad_check",
    "load_tensor",
    "ops",
    "save_tensor",
    "set_default_dtype",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
