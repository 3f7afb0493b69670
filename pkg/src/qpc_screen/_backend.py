"""Kernel backend selection.

Set ``QPC_SCREEN_BACKEND=numpy`` to bypass numba and run the vectorized numpy
kernels. The choice is made once, at import time.
"""
from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

BACKEND_ENV = "QPC_SCREEN_BACKEND"


def requested_backend() -> str:
    value = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {value!r}")
    return value


USE_NUMBA = HAS_NUMBA and requested_backend() == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def get_kernels(name: str | None = None):
    """Return the kernel module for ``name`` (defaults to the active backend)."""
    name = name or BACKEND
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        from . import _kernels_numba as mod
    elif name == "numpy":
        from . import _kernels_numpy as mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return mod
