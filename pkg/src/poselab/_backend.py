"""Kernel backend selection.

Hot inner loops (Lucas-Kanade window solves, LSTM sequence passes) exist in
two variants: numba @njit kernels and vectorized pure-numpy fallbacks.
The active backend is chosen once at import time from the environment:

    POSELAB_BACKEND=numba   force numba (error if numba is missing)
    POSELAB_BACKEND=numpy   force the pure-numpy fallback
    unset / auto            numba when importable, numpy otherwise

Both variants implement the same arithmetic; results agree to float
round-off.  Each backend is individually deterministic.
"""

import os

_VALID = ("numba", "numpy", "auto")


def _resolve() -> str:
    choice = os.environ.get("POSELAB_BACKEND", "auto").strip().lower()
    if choice not in _VALID:
        raise ValueError(
            f"POSELAB_BACKEND must be one of {_VALID}, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _resolve()


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND
