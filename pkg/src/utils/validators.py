import math
from typing import Iterable, List, Sequence

import numpy as np

class InvalidTau(ValueError):
    """Quantile outside the open unit interval."""
    pass

class DataValidator:
    """Validation utilities for quantiles, grids and numeric matrices"""

    @classmethod
    def validate_tau(cls, tau: float) -> float:
        """Validate a quantile with detailed error messages"""
        if tau is None:
            raise InvalidTau("Quantile cannot be empty")

        try:
            value = float(tau)
        except (TypeError, ValueError):
            raise InvalidTau(f"Quantile must be a number, got {tau!r}")

        if not math.isfinite(value):
            raise InvalidTau(f"Quantile must be finite, got {value}")

        if not 0.0 < value < 1.0:
            raise InvalidTau(
                f"Quantile must lie strictly between 0 and 1. "
                f"Provided quantile is {value}. "
                f"Example of a valid grid: 0.05,0.20,0.35,0.50,0.65,0.80,0.95"
            )

        return value

    @classmethod
    def validate_taus(cls, taus: Iterable[float]) -> List[float]:
        """Validate a quantile list and return it sorted and deduplicated"""
        values = sorted({cls.validate_tau(t) for t in taus})
        if not values:
            raise InvalidTau("Quantile list cannot be empty")
        return values

    @classmethod
    def validate_matrix(cls, values: np.ndarray, name: str, allow_negative: bool = False) -> np.ndarray:
        """Check a 2-D numeric block is finite and, unless allowed, non-negative"""
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"{name} must be a 2-D matrix, got {arr.ndim} dimension(s)")

        if not np.all(np.isfinite(arr)):
            rows, cols = np.nonzero(~np.isfinite(arr))
            raise ValueError(f"{name} has a non-finite entry at row {rows[0]}, column {cols[0]}")

        if not allow_negative and np.any(arr < 0):
            rows, cols = np.nonzero(arr < 0)
            raise ValueError(
                f"{name} has a negative entry at row {rows[0]}, column {cols[0]} "
                f"(value {arr[rows[0], cols[0]]})"
            )

        return arr

    @classmethod
    def validate_positive(cls, values: Sequence[float], name: str) -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr <= 0)):
            raise ValueError(f"{name} must contain strictly positive finite values")
        return arr
