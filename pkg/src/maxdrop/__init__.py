"""MaxDropout and comparison regularizers on a small numpy autograd engine."""

from .models import ModelSpec, build, forward
from .regularizers import DropConfig, MaskReport, cutout, dropout, max_dropout, max_dropout_mask, random_erasing
from .rng import Rng
from .tensor import Tensor, backward

__all__ = [
    "DropConfig",
    "MaskReport",
    "ModelSpec",
    "Rng",
    "Tensor",
    "backward",
    "build",
    "cutout",
    "dropout",
    "forward",
    "max_dropout",
    "max_dropout_mask",
    "random_erasing",
]

__version__ = "0.1.0"
