"""
Domain target parameters.

Additive targets are population means of a per-unit function h(z); the
non-additive ones take the whole (N_d, 2) domain vector. Functions receive a
leading replicate axis so one call covers a block of Monte Carlo copies.
"""

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from app.errors import BnerError


class TargetError(BnerError):
    """Unknown target or an ill-defined target value."""
    pass


@dataclass(frozen=True)
class TargetSpec:
    """
    A named domain parameter.

    For ``kind="additive"`` ``h`` maps (..., 2) unit pairs to (...) values and
    the parameter is their domain mean. For ``kind="nonadditive"`` ``h`` maps a
    block of domain vectors (l, N_d, 2) to (l,) values.
    """

    name: str
    kind: Literal["additive", "nonadditive"]
    h: Callable[[np.ndarray], np.ndarray]
    description: str = ""

    @property
    def additive(self) -> bool:
        return self.kind == "additive"


def _first(z: np.ndarray) -> np.ndarray:
    return z[..., 0]


def _second(z: np.ndarray) -> np.ndarray:
    return z[..., 1]


def _unit_ratio(z: np.ndarray) -> np.ndarray:
    return z[..., 0] / (z[..., 0] + z[..., 1])


def _ratio_of_means(z: np.ndarray) -> np.ndarray:
    num = np.ascontiguousarray(z[..., 0]).sum(axis=-1)
    den = num + np.ascontiguousarray(z[..., 1]).sum(axis=-1)
    if np.any(den <= 0):
        raise TargetError("ratio of means has a non-positive denominator")
    return num / den


MEAN1 = TargetSpec("mean1", "additive", _first, "domain mean of z1")
MEAN2 = TargetSpec("mean2", "additive", _second, "domain mean of z2")
MEAN_OF_RATIOS = TargetSpec(
    "mean_of_ratios", "additive", _unit_ratio, "domain mean of z1 / (z1 + z2)"
)
RATIO_OF_MEANS = TargetSpec(
    "ratio_of_means", "nonadditive", _ratio_of_means, "sum z1 / sum (z1 + z2)"
)

TARGETS = {t.name: t for t in (MEAN1, MEAN2, MEAN_OF_RATIOS, RATIO_OF_MEANS)}

BUILTIN_ORDER = ("mean1", "mean2", "mean_of_ratios", "ratio_of_means")


def get_target(name: str) -> TargetSpec:
    target = TARGETS.get(name)
    if target is None:
        raise TargetError(f"unknown target '{name}' (choose from {sorted(TARGETS)})")
    return target


def parse_targets(names) -> list[TargetSpec]:
    """Resolve a comma-separated string or a list of names."""
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    if not names:
        raise TargetError("at least one target is required")
    return [get_target(n) for n in names]


def additive_target(name: str, h: Callable[[np.ndarray], np.ndarray]) -> TargetSpec:
    """Custom additive target from a per-unit function of (..., 2) pairs."""
    return TargetSpec(name, "additive", h)


def nonadditive_target(name: str, h: Callable[[np.ndarray], np.ndarray]) -> TargetSpec:
    """Custom non-additive target from a function of (l, N_d, 2) domain blocks."""
    return TargetSpec(name, "nonadditive", h)
