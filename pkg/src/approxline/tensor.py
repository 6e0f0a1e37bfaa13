"""Dense float64 tensors and center/radius interval arithmetic.

Concrete activations are plain ``numpy.ndarray`` objects of dtype float64.
Boxes are stored as a center and a non-negative radius so that affine maps
become ``c' = M c + b`` and ``r' = |M| r``.

Rounding is not directed outward, so interval results are sound only up to
ordinary float error (tests use a 1e-9 slack).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operation expects."""

    def __init__(self, expected, actual, what: str = "tensor"):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what} shape mismatch: expected {self.expected}, got {self.actual}")


def as_tensor(x, shape: Sequence[int] | None = None) -> np.ndarray:
    """Convert ``x`` to a finite float64 array, optionally reshaping it."""
    arr = np.array(x, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape dimensions must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(shape, arr.shape)
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    return arr


def check_shape(x: np.ndarray, expected: Sequence[int], what: str = "input") -> None:
    if tuple(x.shape) != tuple(expected):
        raise ShapeError(expected, x.shape, what)


@dataclass(frozen=True)
class IntervalTensor:
    """The box prod_l [center_l - radius_l, center_l + radius_l]."""

    center: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        r = np.asarray(self.radius, dtype=np.float64)
        if c.shape != r.shape:
            raise ShapeError(c.shape, r.shape, "radius")
        if np.any(r < 0):
            raise ValueError("interval radius must be non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @classmethod
    def from_bounds(cls, lower, upper) -> "IntervalTensor":
        lo = np.asarray(lower, dtype=np.float64)
        hi = np.asarray(upper, dtype=np.float64)
        if lo.shape != hi.shape:
            raise ShapeError(lo.shape, hi.shape, "upper bound")
        if np.any(hi < lo):
            raise ValueError("upper bound below lower bound")
        # max(.., 0) guards against a -0.0/rounding radius
        return cls(0.5 * (lo + hi), np.maximum(0.5 * (hi - lo), 0.0))

    @classmethod
    def point(cls, x) -> "IntervalTensor":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.zeros_like(x))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.center.shape

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.radius

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.radius

    def contains(self, x, slack: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(np.abs(x - self.center) <= self.radius + slack))


class AffineLayer(Protocol):
    """Anything with an equivalent affine map ``x -> M x + b`` on batches."""

    input_shape: tuple[int, ...]

    def apply(self, xs: np.ndarray) -> np.ndarray: ...

    def apply_abs(self, rs: np.ndarray) -> np.ndarray: ...


def affine_apply(layer: AffineLayer, x) -> np.ndarray:
    """Evaluate ``M x + b`` for a single (unbatched) input."""
    x = np.asarray(x, dtype=np.float64)
    check_shape(x, layer.input_shape)
    return layer.apply(x[None])[0]


def interval_affine(layer: AffineLayer, box: IntervalTensor) -> IntervalTensor:
    check_shape(box.center, layer.input_shape)
    c = layer.apply(box.center[None])[0]
    r = layer.apply_abs(box.radius[None])[0]
    return IntervalTensor(c, r)


def relu_box_arrays(c: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hi = np.maximum(c + r, 0.0)
    lo = np.maximum(c - r, 0.0)
    return 0.5 * (hi + lo), 0.5 * (hi - lo)


def relu_box(box: IntervalTensor) -> IntervalTensor:
    """Interval hull of ReLU over ``box``."""
    return IntervalTensor(*relu_box_arrays(box.center, box.radius))
