"""Global float mode. 64-bit is the default and the only mode in which
gradient checks and bit-reproducibility are guaranteed; 32-bit is a speed
option for training runs."""

from __future__ import annotations

import numpy as np

_DTYPE = np.dtype(np.float64)

_ALLOWED = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}


def set_default_dtype(dtype) -> None:
    """Set the process-wide float dtype used when models are created."""
    global _DTYPE
    if isinstance(dtype, str):
        if dtype not in _ALLOWED:
            raise ValueError(f"dtype must be one of {sorted(_ALLOWED)}, got {dtype!r}")
        _DTYPE = _ALLOWED[dtype]
        return
    dt = np.dtype(dtype)
    if dt not in _ALLOWED.values():
        raise ValueError(f"dtype must be float32 or float64, got {dt}")
    _DTYPE = dt


def default_dtype() -> np.dtype:
    return _DTYPE
