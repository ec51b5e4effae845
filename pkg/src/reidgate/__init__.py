"""Gate-controlled caption encoding fused with visual features for
retrieval-style person re-identification."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
