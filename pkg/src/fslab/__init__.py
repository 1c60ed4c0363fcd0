"""Few-step generative sampler laboratory on 2-D toy distributions."""

from .tensor import DualTensor, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "DualTensor", "__version__"]
