"""Numba switch.

Set ``CMA_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba is
not importable the numpy path is used automatically.
"""
import os

_disabled = os.environ.get("CMA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA and not _disabled


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def resolve_backend(backend=None):
    """Map ``None | "numba" | "numpy"`` to a concrete backend name."""
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
