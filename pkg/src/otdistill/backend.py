"""Kernel backend selection.

The iterative solvers have two interchangeable implementations: explicit
loops compiled with numba, and vectorized pure numpy. The environment
variable ``OTDISTILL_BACKEND`` picks one at import time:

    auto   (default) use numba when importable, numpy otherwise
    numba  require numba; raise if it cannot be imported
    numpy  force the pure-numpy path even when numba is installed

Both paths compute the same recurrences; results agree to float64
round-off. ``otdistill bench --compare-kernels`` times them side by side.
"""

import os

_CHOICES = ("auto", "numba", "numpy")

BACKEND_ENV_VAR = "OTDISTILL_BACKEND"

_requested = os.environ.get(BACKEND_ENV_VAR, "auto").strip().lower() or "auto"
if _requested not in _CHOICES:
    raise ValueError(
        f"{BACKEND_ENV_VAR} must be one of {_CHOICES}, got {_requested!r}"
    )

NUMBA_AVAILABLE = False
if _requested != "numpy":
    try:
        import numba  # noqa: F401

        NUMBA_AVAILABLE = True
    except ImportError:
        if _requested == "numba":
            raise ImportError(
                f"{BACKEND_ENV_VAR}=numba but numba is not importable"
            )

NUMBA_ENABLED = NUMBA_AVAILABLE and _requested != "numpy"

ACTIVE_BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def maybe_njit(fn):
    """Apply ``numba.njit`` when the numba backend is active, else no-op."""
    if NUMBA_ENABLED:
        from numba import njit

        return njit(cache=True)(fn)
    return fn
