"""Per-vision-token guidance weights from decoder attention, plus ablation variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import LayoutError, ShapeError
from .numerics import SeededStream, stream_uniform_array

XI_FLOOR = 1e-12


@dataclass(frozen=True)
class PromptGuidance:
    """One strictly positive weight per current vision token, in sequence order."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.array(self.xi, dtype=np.float32).ravel()
        if xi.size == 0 or not np.all(xi > 0):
            raise ShapeError("guidance must be a nonempty vector of positive weights")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    def __len__(self):
        return self.xi.size

    def take(self, indices) -> np.ndarray:
        return self.xi[np.asarray(indices, dtype=np.int64)]


@dataclass(frozen=True)
class AttentionTensor:
    """Post-softmax causal attention, shape (heads, seq_len, seq_len)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 3 or p.shape[1] != p.shape[2]:
            raise ShapeError(f"attention must be (H, n, n), got {p.shape}")
        object.__setattr__(self, "probs", p)

    @property
    def heads(self) -> int:
        return self.probs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.probs.shape[1]


def accumulate_prompt_attention(
    attn: AttentionTensor, vision_range: tuple[int, int], prompt_indices: Iterable[int]
) -> PromptGuidance:
    """xi_i = sum over heads and prompt keys j of A[h, i, j], floored at 1e-12.

    ``vision_range`` is a half-open [start, stop) interval of query rows.
    """
    start, stop = vision_range
    prompt = sorted(set(int(j) for j in prompt_indices))
    n = attn.seq_len
    if not 0 <= start < stop <= n:
        raise LayoutError(f"vision range [{start}, {stop}) outside sequence of {n}")
    if any(j < 0 or j >= n for j in prompt):
        raise LayoutError("prompt index outside the sequence")
    if any(start <= j < stop for j in prompt):
        raise LayoutError("prompt indices overlap the vision range")
    if prompt:
        block = attn.probs[:, start:stop, :][:, :, prompt].astype(np.float64)
        xi = block.sum(axis=(0, 2))
    else:
        xi = np.zeros(stop - start)
    return PromptGuidance(np.maximum(xi, XI_FLOOR))


def uniform_guidance(n: int) -> PromptGuidance:
    return PromptGuidance(np.ones(n, dtype=np.float32))


def random_guidance(n: int, stream: SeededStream) -> tuple[PromptGuidance, SeededStream]:
    """Weights in (1e-12, 1]; returns the advanced stream alongside."""
    u, stream = stream_uniform_array(stream, n, 0.0, 1.0)
    xi = np.maximum(np.float32(1.0) - u, np.float32(XI_FLOOR))
    return PromptGuidance(xi), stream
