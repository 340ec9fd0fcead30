"""interstyle: a style-interleaved training engine for domain-generalizable
embeddings, built on a small tape-based autodiff core.

The hot convolution kernels run through a compiled Cython extension when
available (``interstyle.kernels_backend()`` reports which backend is live).
"""

try:
    # BLAS worker pools busy-wait after each call and starve the OpenMP
    # threads inside the compiled kernels on small machines; the matmuls
    # this engine issues are tiny, so single-threaded BLAS is strictly
    # better here.
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover - threadpoolctl is a declared dep
    pass

from . import _kernels
from .autograd import Tensor, Tape, active_tape, backward, no_grad
from .errors import ConfigurationError, NumericalError

__version__ = "0.1.0"


def kernels_backend() -> str:
    """Name of the convolution backend selected at import ('cython'/'numpy')."""
    return _kernels.BACKEND


__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "backward",
    "no_grad",
    "ConfigurationError",
    "NumericalError",
    "kernels_backend",
    "__version__",
]
