"""
Module: utils.validators
------------------------

Small validation helpers shared by the services. Each function raises one of
the ``app.utils.errors`` exceptions with a descriptive message and returns
the validated value, so calls can be used inline.
"""

from typing import Iterable, Tuple

from app.utils.errors import ParameterError

SPATIAL_AXES = ("x", "y", "z")


def validate_positive(name: str, value: float) -> float:
    if not value > 0:
        raise ParameterError(f"{name} must be > 0, got {value}")
    return value


def validate_range(
    name: str, value: float, low: float, high: float, high_inclusive: bool = True
) -> float:
    ok = low <= value <= high if high_inclusive else low <= value < high
    if not ok:
        bracket = "]" if high_inclusive else ")"
        raise ParameterError(f"{name} must lie in [{low}, {high}{bracket}, got {value}")
    return value


def validate_axes(axes: Iterable[str]) -> Tuple[int, ...]:
    """Turn axis names into spatial axis indices (x=0, y=1, z=2)."""
    indices = []
    for axis in axes:
        if axis not in SPATIAL_AXES:
            raise ParameterError(f"unknown spatial axis {axis!r}, expected x, y or z")
        index = SPATIAL_AXES.index(axis)
        if index in indices:
            raise ParameterError(f"axis {axis!r} given twice")
        indices.append(index)
    return tuple(indices)
