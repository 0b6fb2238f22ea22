from .core import (
    OP_KINDS,
    Array,
    ShapeError,
    Tape,
    backward,
    forward_op,
    get_default_dtype,
    kink_log,
    set_debug,
    set_default_dtype,
)
from .gradcheck import grad_check
from . import checkpoint, ops

__all__ = [
    "OP_KINDS",
    "Array",
    "ShapeError",
    "Tape",
    "backward",
    "checkpoint",
    "forward_op",
    "get_default_dtype",
    "grad_check",
    "kink_log",
    "ops",
    "set_debug",
    "set_default_dtype",
]
