"""Floating-point precision tags shared across the package."""

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}

EPSILON = {name: float(np.finfo(dt).eps) for name, dt in DTYPES.items()}


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected 'single' or 'double'") from None


def precision_of(array: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if array.dtype == dt:
            return name
    raise ValueError(f"array dtype {array.dtype} is not a supported precision")
