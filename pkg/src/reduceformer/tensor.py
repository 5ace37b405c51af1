"""Dense rank-4 tensors in batch/channel/height/width layout, plus a portable RNG.

Every value flowing through this package is a ``Tensor``: a contiguous
row-major (B, C, H, W) float array.  float32 is the inference dtype;
float64 exists for gradient checking.  Tensors are treated as immutable
after construction -- no op in this package writes into an input buffer.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operand shape violates an operation's contract."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Rank-4 dense array.

    ``graph``/``nid`` are set when the tensor was produced while recording
    onto a :class:`~reduceformer.graph.Graph`; they are ``None`` for plain
    eager values.
    """

    __slots__ = ("data", "graph", "nid")

    def __init__(self, data, graph=None, nid: Optional[int] = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4 (B,C,H,W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor dims must all be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.graph = graph
        self.nid = nid

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def from_values(cls, shape: Sequence[int], values, dtype=np.float32) -> "Tensor":
        """Build a tensor of ``shape`` from a flat value sequence."""
        arr = np.asarray(values, dtype=dtype).reshape(tuple(shape))
        return cls(arr)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float32) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=np.float32) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=dtype))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = "" if self.graph is None else f", node={self.nid}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output ``i`` of a stream seeded with ``s`` is ``mix64(s + (i+1)*GAMMA)``
    where ``GAMMA = 0x9E3779B97F4A7C15`` and ``mix64`` is the SplitMix64
    finalizer (xor-shift 30/27/31 with the standard multipliers).  All
    arithmetic is mod 2^64, so the stream is bit-identical on every
    platform, and any prefix can be regenerated from (seed, counter).
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0,
                dtype=np.float32) -> np.ndarray:
        """Uniform floats in [low, high); drawn in float64 then cast."""
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return (low + (high - low) * u).reshape(shape).astype(dtype)

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in [0, high).  Modulo draw; bias is negligible
        for the small ``high`` values used here (labels, indices)."""
        return (self.raw(n) % np.uint64(high)).astype(np.int64)

    def tensor(self, shape: Sequence[int], low: float = -1.0, high: float = 1.0,
               dtype=np.float32) -> Tensor:
        return Tensor(self.uniform(shape, low, high, dtype))
