"""Backend selection for the compiled kernels.

``S2SDROUGHT_NUMBA=0`` forces the pure-numpy path; anything else (or unset)
uses numba when it can be imported.
"""
import os
import warnings

# old system TBB builds trigger a harmless threading-layer warning on first parallel launch
warnings.filterwarnings("ignore", message="The TBB threading layer")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_flag = os.environ.get("S2SDROUGHT_NUMBA", "1").strip().lower()
USE_NUMBA = HAS_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a no-op decorator without numba."""
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def set_threads(n):
    """Cap numba worker threads (no effect on the numpy path)."""
    if HAS_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def backend():
    return "numba" if USE_NUMBA else "numpy"
