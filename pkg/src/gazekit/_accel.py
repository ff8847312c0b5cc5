"""Backend selection for the compiled raster kernels.

Set ``GAZEKIT_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths
perform the same floating point operations per pixel and are tested for
bit-identical output.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("GAZEKIT_DISABLE_NUMBA", "").strip().lower() in _FALSY


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator."""
    if HAS_NUMBA:
        from numba import njit as _njit
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
