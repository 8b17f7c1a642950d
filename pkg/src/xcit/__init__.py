"""Cross-covariance image transformer built on a small numpy autodiff core."""

from .model import PRESET_NAMES, XcitConfig, build, count_flops, count_params, forward, preset
from .tensor import Param, Tape, Tensor

__all__ = ["PRESET_NAMES", "Param", "Tape", "Tensor", "XcitConfig", "build", "count_flops",
           "count_params", "forward", "preset"]
