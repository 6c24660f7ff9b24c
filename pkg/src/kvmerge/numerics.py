"""Deterministic numeric substrate: float32 matrices, splitmix64 stream, masked softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, InvalidRangeError, ShapeError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_24 = float(1 << 24)


@dataclass(frozen=True)
class Matrix:
    """Dense row-major float32 matrix.

    ``data`` may be given flat (length ``rows * cols``) or already shaped.
    The stored array is read-only.
    """

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"matrix dims must be >= 1, got {self.rows}x{self.cols}")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.size != self.rows * self.cols:
            raise ShapeError(
                f"data length {arr.size} != rows*cols = {self.rows * self.cols}"
            )
        if arr.ndim == 2 and arr.shape != (self.rows, self.cols):
            raise ShapeError(f"data shape {arr.shape} != ({self.rows}, {self.cols})")
        arr = np.array(arr.reshape(self.rows, self.cols), dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "Matrix":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got ndim={arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeededStream:
    """splitmix64 state, advanced by value."""

    state: int

    def __post_init__(self):
        object.__setattr__(self, "state", int(self.state) & MASK64)


def stream_next_u64(stream: SeededStream) -> tuple[int, SeededStream]:
    state = (stream.state + GOLDEN_GAMMA) & MASK64
    return _mix(state), SeededStream(state)


def stream_next_u64_array(stream: SeededStream, n: int) -> tuple[np.ndarray, SeededStream]:
    """The next ``n`` outputs at once; identical to ``n`` scalar calls."""
    if n <= 0:
        return np.zeros(0, dtype=np.uint64), stream
    # splitmix64 output k is mix(state + k*gamma), so the whole block is vectorisable.
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(stream.state) + k * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z, SeededStream(stream.state + n * GOLDEN_GAMMA)


def u64_to_uniform_f32(u, lo: float, hi: float):
    """Map raw u64 draws to [lo, hi) using the top 24 bits, in float32 arithmetic."""
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    top = np.asarray(u, dtype=np.uint64) >> np.uint64(40)
    frac = top.astype(np.float32) / np.float32(_TWO_24)
    lo32, hi32 = np.float32(lo), np.float32(hi)
    out = lo32 + (hi32 - lo32) * frac
    # float32 rounding can land exactly on hi for a frac just below 1
    out = np.where(out >= hi32, np.nextafter(hi32, lo32, dtype=np.float32), out)
    return out.astype(np.float32)


def stream_uniform_f32(stream: SeededStream, lo: float, hi: float) -> tuple[np.float32, SeededStream]:
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    u, stream = stream_next_u64(stream)
    return np.float32(u64_to_uniform_f32(np.uint64(u), lo, hi)), stream


def stream_uniform_array(
    stream: SeededStream, n: int, lo: float, hi: float
) -> tuple[np.ndarray, SeededStream]:
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    u, stream = stream_next_u64_array(stream, n)
    return u64_to_uniform_f32(u, lo, hi), stream


def softmax_masked_row(scores, mask=None) -> np.ndarray:
    """Softmax over one row; ``mask[i]`` True means entry i is excluded (probability 0)."""
    s = np.asarray(scores, dtype=np.float32)
    if mask is None:
        mask = np.zeros(s.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise ShapeError(f"mask shape {mask.shape} != scores shape {s.shape}")
    if mask.all():
        raise DegenerateRowError("every entry of the row is masked")
    out = np.zeros_like(s)
    live = s[~mask]
    e = np.exp(live - live.max())
    out[~mask] = e / e.sum()
    return out


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of (..., n, n) scores under a lower-triangular causal mask.

    Entries above the diagonal are exactly zero.
    """
    n = scores.shape[-1]
    visible = np.tril(np.ones((n, n), dtype=bool))
    s = np.where(visible, scores, -np.inf).astype(np.float32)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(visible, np.exp(s), np.float32(0.0))
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
