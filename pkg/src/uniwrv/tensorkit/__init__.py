"""Dense tensors with tape-based reverse-mode gradients."""

from . import _backend as backend
from . import ops
from .gradcheck import REGISTRY, GradcheckReport, check_function, gradcheck, register
from .ops import (
    avg_pool,
    bilinear_sample,
    concat,
    conv2d,
    global_avg_pool,
    grid_sample,
    pixel_shuffle,
    pixel_unshuffle,
    softmax,
    warp,
)
from .tensor import Tape, Tensor, backward, current_tape, parameter, sg, stop_gradient

__all__ = [
    "REGISTRY",
    "GradcheckReport",
    "Tape",
    "Tensor",
    "avg_pool",
    "backend",
    "backward",
    "bilinear_sample",
    "check_function",
    "concat",
    "conv2d",
    "current_tape",
    "global_avg_pool",
    "gradcheck",
    "grid_sample",
    "ops",
    "parameter",
    "pixel_shuffle",
    "pixel_unshuffle",
    "register",
    "sg",
    "softmax",
    "stop_gradient",
    "warp",
]
