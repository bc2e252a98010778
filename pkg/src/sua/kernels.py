"""Kernel backend selection.

The compiled extension is used when importable; ``SUA_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _fallback

if os.environ.get("SUA_PURE_PYTHON"):
    _ext = None
else:
    try:
        from . import _kernels as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def potts_rows(data, gamma, backend=None):
    """Exact 1D Potts on each row: returns (labels, reconstruction)."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("potts_rows expects a 2D array")
    impl = _pick(backend)
    return impl.potts_rows(data, float(gamma))


def bilinear_sample(stack, x, y, backend=None):
    """Bilinearly sample a (C, H, W) stack at float coords with border clamping."""
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    impl = _pick(backend)
    return impl.bilinear_sample(stack, x, y)


def _pick(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")
