from . import ops
from .optim import AdamState, adam_step
from .svd import SvdConvergenceError, svd, svd_f64
from .tensor import NumericError, OpRecord, ShapeError, Tape, Tensor, backward

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "OpRecord",
    "backward",
    "ShapeError",
    "NumericError",
    "AdamState",
    "adam_step",
    "svd",
    "svd_f64",
    "SvdConvergenceError",
]
