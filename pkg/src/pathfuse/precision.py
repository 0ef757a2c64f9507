"""Global numeric precision switch.

Training and inference run in float32 by default; verification work
(gradient checks, fusion equivalence at tight tolerance) switches the whole
engine to float64. The active dtype applies to every Tensor created while
the mode is in effect.
"""

from contextlib import contextmanager

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_active = np.float32


def set_precision(mode: str) -> None:
    """Set the global dtype. ``mode`` is 'f32' or 'f64'."""
    global _active
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'f32' or 'f64'")
    _active = _DTYPES[mode]


def active_dtype():
    return _active


def mode() -> str:
    return "f64" if _active == np.float64 else "f32"


@contextmanager
def use_precision(mode: str):
    """Temporarily switch precision, restoring the previous mode on exit."""
    global _active
    prev = _active
    set_precision(mode)
    try:
        yield
    finally:
        _active = prev
