"""Dispatch to the active kernel backend (see _backend)."""

from . import _backend
from . import _kernels_numpy as numpy_kernels

if _backend.BACKEND == "numba":
    from . import _kernels_numba as _impl
else:
    _impl = numpy_kernels

numba_kernels = None
if _backend.BACKEND == "numba":
    numba_kernels = _impl

warp_bilinear = _impl.warp_bilinear
lk_refine_level = _impl.lk_refine_level
lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward

backend_name = _backend.backend_name
