"""Coarse-to-fine abdominal MR segmentation on a small numpy autodiff core."""

from .tensor import Tensor, backward, gradcheck, no_grad
from .medio import ORGAN_NAMES, N_CLASSES

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "gradcheck", "no_grad", "ORGAN_NAMES",
           "N_CLASSES", "__version__"]
