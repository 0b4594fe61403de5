"""
Separable response transformations y = g(z) and their inverses.

Each built-in applies the same scalar function to both responses; custom
transforms can pair two different functions.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.errors import BnerError


# Largest argument exp() accepts without overflowing to inf.
LOG_MAX_ARGUMENT = float(np.log(np.finfo(np.float64).max))


class TransformError(BnerError):
    """Transform input outside its domain, or an overflowing inverse."""
    pass


@dataclass(frozen=True)
class Transform:
    """A named separable pair (g1, g2) with inverses (g1_inv, g2_inv)."""

    name: str
    g1: Callable[[np.ndarray], np.ndarray]
    g2: Callable[[np.ndarray], np.ndarray]
    g1_inv: Callable[[np.ndarray], np.ndarray]
    g2_inv: Callable[[np.ndarray], np.ndarray]
    positive: bool = False

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Map (..., 2) original-scale values to the model scale."""
        z = np.asarray(z, dtype=np.float64)
        if self.positive and np.any(z <= 0):
            raise TransformError(f"transform '{self.name}' requires positive values")
        return np.stack([self.g1(z[..., 0]), self.g2(z[..., 1])], axis=-1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Map (..., 2) model-scale values back to the original scale."""
        y = np.asarray(y, dtype=np.float64)
        return np.stack([self.g1_inv(y[..., 0]), self.g2_inv(y[..., 1])], axis=-1)


def _safe_exp(y: np.ndarray) -> np.ndarray:
    if np.any(y > LOG_MAX_ARGUMENT):
        raise TransformError(
            f"exp overflow: argument {float(np.max(y))} exceeds {LOG_MAX_ARGUMENT:.6f}"
        )
    return np.exp(y)


def _identity(v: np.ndarray) -> np.ndarray:
    return v


IDENTITY = Transform(
    name="identity",
    g1=_identity,
    g2=_identity,
    g1_inv=_identity,
    g2_inv=_identity,
)

LOG = Transform(
    name="log",
    g1=np.log,
    g2=np.log,
    g1_inv=_safe_exp,
    g2_inv=_safe_exp,
    positive=True,
)

TRANSFORMS = {
    "identity": IDENTITY,
    "log": LOG,
}


def get_transform(name: str) -> Transform:
    """Look up a built-in transform by name."""
    transform = TRANSFORMS.get(name)
    if transform is None:
        raise TransformError(f"unknown transform '{name}' (choose from {sorted(TRANSFORMS)})")
    return transform


def transform_inverse(transform: Transform, y) -> np.ndarray:
    """
    z = g^{-1}(y) for a pair (or an array of pairs).

    Raises:
        TransformError: if y is not finite or the inverse overflows.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != (2,):
        raise TransformError(f"expected pairs in the last axis, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise TransformError("transform input must be finite")
    return transform.inverse(y)
