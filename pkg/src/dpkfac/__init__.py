"""dpkfac: differentially private training with KFAC preconditioners built
from synthetic probes, plus the privacy accountant and spectral diagnostics
needed to validate them."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
