"""Vision tokens laid out on a 2-D grid, window partitioning and merge provenance.

A ``TokenGrid`` always refers to the *original* image grid (``height`` x
``width`` cells). After compression it holds fewer tokens than cells; each
surviving token remembers the coordinate of its representative cell and the
set of original cells it stands for.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, InvalidWindowError, ShapeError
from .numerics import Matrix


@dataclass(frozen=True)
class TokenGrid:
    height: int
    width: int
    embeddings: Matrix
    coords: tuple[tuple[int, int], ...]
    provenance: tuple[frozenset[int], ...]

    def __post_init__(self):
        n = self.embeddings.rows
        if len(self.coords) != n or len(self.provenance) != n:
            raise ShapeError(
                f"{n} embedding rows but {len(self.coords)} coords / "
                f"{len(self.provenance)} provenance sets"
            )

    @classmethod
    def from_array(cls, arr, height: int, width: int) -> "TokenGrid":
        """Full grid from an (height*width, dim) or (height, width, dim) array."""
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 3:
            if arr.shape[:2] != (height, width):
                raise ShapeError(f"array grid {arr.shape[:2]} != ({height}, {width})")
            arr = arr.reshape(height * width, arr.shape[2])
        if arr.ndim != 2 or arr.shape[0] != height * width:
            raise ShapeError(f"expected {height * width} rows, got shape {arr.shape}")
        coords = tuple((r, c) for r in range(height) for c in range(width))
        prov = tuple(frozenset([i]) for i in range(height * width))
        return cls(height, width, Matrix.from_array(arr), coords, prov)

    @property
    def n_tokens(self) -> int:
        return self.embeddings.rows

    @property
    def dim(self) -> int:
        return self.embeddings.cols

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def cell_id(self, token: int) -> int:
        r, c = self.coords[token]
        return r * self.width + c

    def with_embeddings(self, arr) -> "TokenGrid":
        return TokenGrid(self.height, self.width, Matrix.from_array(arr), self.coords, self.provenance)


@dataclass(frozen=True)
class Window:
    window_index: tuple[int, int]
    token_indices: tuple[int, ...]


def balanced_segments(length: int, parts: int) -> list[int]:
    """Split ``length`` into ``parts`` contiguous lengths; the first ``length % parts`` get one extra."""
    base, extra = divmod(length, parts)
    return [base + 1 if i < extra else base for i in range(parts)]


def _band_lookup(length: int, parts: int) -> np.ndarray:
    band = np.empty(length, dtype=np.int64)
    start = 0
    for i, seg in enumerate(balanced_segments(length, parts)):
        band[start : start + seg] = i
        start += seg
    return band


def partition_windows(grid: TokenGrid, w: int) -> list[Window]:
    """Bucket the current tokens into ``w`` x ``w`` spatial windows.

    Bands are balanced splits of the original grid axes; a token falls in the
    band holding its representative cell. On a full grid every window is
    nonempty; after compression empty windows are dropped.
    """
    if w < 1 or w > min(grid.height, grid.width):
        raise InvalidWindowError(
            f"window count {w} outside [1, {min(grid.height, grid.width)}] "
            f"for a {grid.height}x{grid.width} grid"
        )
    row_band = _band_lookup(grid.height, w)
    col_band = _band_lookup(grid.width, w)
    buckets: dict[tuple[int, int], list[int]] = {
        (i, j): [] for i in range(w) for j in range(w)
    }
    order = sorted(range(grid.n_tokens), key=grid.cell_id)
    for t in order:
        r, c = grid.coords[t]
        buckets[(int(row_band[r]), int(col_band[c]))].append(t)
    return [Window(key, tuple(toks)) for key, toks in buckets.items() if toks]


@dataclass(frozen=True)
class Survivors:
    """Tokens that leave one window: their indices in the input grid, new rows and provenance."""

    token_indices: tuple[int, ...]
    embeddings: np.ndarray
    provenance: tuple[frozenset[int], ...]


def reassemble(grid: TokenGrid, parts: Iterable[Survivors]) -> TokenGrid:
    """Concatenate surviving tokens of all windows in ascending original-cell order."""
    rows: list[tuple[int, int, np.ndarray, frozenset[int]]] = []
    seen: set[int] = set()
    for part in parts:
        emb = np.asarray(part.embeddings, dtype=np.float32).reshape(len(part.token_indices), -1)
        if len(part.provenance) != len(part.token_indices):
            raise ShapeError("survivor provenance length mismatch")
        for k, t in enumerate(part.token_indices):
            if t in seen:
                raise CorruptionError(f"token {t} survives twice")
            seen.add(t)
            rows.append((grid.cell_id(t), t, emb[k], part.provenance[k]))
    if not rows:
        raise CorruptionError("no surviving tokens")
    rows.sort(key=lambda item: item[0])
    emb = np.stack([item[2] for item in rows]).astype(np.float32)
    coords = tuple(grid.coords[item[1]] for item in rows)
    prov = tuple(item[3] for item in rows)
    return TokenGrid(grid.height, grid.width, Matrix.from_array(emb), coords, prov)


def check_provenance(provenance: Sequence[frozenset[int]], n_cells: int, evicted: frozenset[int] = frozenset()) -> None:
    """Raise CorruptionError unless the sets (plus ``evicted``) partition ``range(n_cells)``."""
    seen: set[int] = set(evicted)
    total = len(evicted)
    for cells in provenance:
        if not cells:
            raise CorruptionError("empty provenance set")
        total += len(cells)
        seen |= cells
    if total != len(seen):
        raise CorruptionError("provenance sets overlap")
    if seen != set(range(n_cells)):
        raise CorruptionError("provenance does not cover every original cell")
