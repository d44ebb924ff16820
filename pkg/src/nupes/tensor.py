"""Dense tensor helpers shared by every other module.

Tensors are plain numpy arrays. Model data is stored as float32, error sums and
matrix products are accumulated in float64. ``as_tensor`` is the single entry
point that validates inputs and freezes the result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class GranularityError(ValueError):
    pass


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Copy ``data`` into a read-only array, rejecting NaN/Inf and empty dims."""
    arr = np.array(data, dtype=dtype, copy=True)
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"all dimensions must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    arr.setflags(write=False)
    return arr


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    return np.matmul(x.astype(np.float64), w.astype(np.float64))


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, np.zeros_like(x))


@dataclass(frozen=True)
class Granularity:
    """How scales are shared across a tensor.

    Channels run along the last axis (weights are stored ``in x out``), so
    ``per-channel`` gives one scale per output column. ``per-group`` further
    splits every channel into contiguous groups of ``group_size`` values.
    """

    kind: str = "per-tensor"
    group_size: int = 128

    def __post_init__(self):
        if self.kind not in ("per-tensor", "per-channel", "per-group"):
            raise GranularityError(f"unknown granularity {self.kind!r}")
        if self.kind == "per-group" and self.group_size < 2:
            raise GranularityError("group size must be >= 2")

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        """Parse ``per-tensor``, ``per-channel`` or ``per-group:<size>``."""
        kind, _, size = text.partition(":")
        if kind == "per-group":
            return cls(kind, int(size) if size else 128)
        return cls(kind)

    def __str__(self):
        if self.kind == "per-group":
            return f"per-group:{self.group_size}"
        return self.kind


PER_TENSOR = Granularity("per-tensor")
PER_CHANNEL = Granularity("per-channel")


def group_view(x: np.ndarray, granularity: Granularity = PER_TENSOR) -> np.ndarray:
    """Reshape ``x`` to ``(channels, groups, group_len)``.

    The reduction for a scale always runs over the last axis of the result.
    """
    x = np.asarray(x)
    g = granularity
    if g.kind == "per-tensor":
        return x.reshape(1, 1, -1)
    if x.ndim < 2 and g.kind == "per-channel":
        raise GranularityError("per-channel granularity needs at least 2 dims")
    channels = np.moveaxis(x, -1, 0).reshape(x.shape[-1], -1) if x.ndim >= 2 else x.reshape(1, -1)
    if g.kind == "per-channel":
        return channels[:, None, :]
    length = channels.shape[1]
    if length % g.group_size:
        raise GranularityError(
            f"group size {g.group_size} does not divide channel length {length}"
        )
    return channels.reshape(channels.shape[0], length // g.group_size, g.group_size)


def ungroup(grouped: np.ndarray, shape: tuple, granularity: Granularity = PER_TENSOR) -> np.ndarray:
    """Inverse of :func:`group_view`."""
    if granularity.kind == "per-tensor" or len(shape) < 2:
        return grouped.reshape(shape)
    moved = (shape[-1],) + tuple(shape[:-1])
    return np.moveaxis(grouped.reshape(moved), 0, -1)


def reduce_max_abs(x: np.ndarray, granularity: Granularity = PER_TENSOR) -> np.ndarray:
    """Max |x| per scale group, shaped ``(channels, groups)``."""
    return np.abs(group_view(x, granularity)).max(axis=-1)
