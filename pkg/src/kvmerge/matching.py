"""Feature divergence, bipartite A/B split and per-window merge plans."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InfeasibleRemovalError, ShapeError

NORM_FLOOR = 1e-12


class FdMetric(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    L2_SQUARED = "l2sq"

    @classmethod
    def parse(cls, name: "str | FdMetric") -> "FdMetric":
        if isinstance(name, FdMetric):
            return name
        aliases = {
            "cosine": cls.COSINE,
            "cosine-divergence": cls.COSINE,
            "euclidean": cls.EUCLIDEAN,
            "l2sq": cls.L2_SQUARED,
            "l2-squared": cls.L2_SQUARED,
        }
        try:
            return aliases[str(name).lower()]
        except KeyError:
            raise ValueError(f"unknown metric {name!r}; expected one of {sorted(aliases)}") from None


class MatchingMode(str, enum.Enum):
    BIPARTITE = "bipartite"
    PAIRWISE = "pairwise"


@dataclass(frozen=True)
class MergePlan:
    """Selected edges for one window. All indices are window-local.

    ``edges`` holds (source, destination) pairs; every source is deleted and
    folded into its destination. ``edge_fd`` is aligned with ``edges``.
    """

    a_indices: tuple[int, ...]
    b_indices: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    removed: frozenset[int]
    kept_order: tuple[int, ...]
    edge_fd: tuple[float, ...] = ()
    comparisons: int = 0

    def __post_init__(self):
        sources = [a for a, _ in self.edges]
        if len(set(sources)) != len(sources):
            raise ShapeError("a source token appears in more than one edge")
        if set(sources) != set(self.removed) or not self.removed <= set(self.a_indices):
            raise ShapeError("removed set must equal the edge sources and lie in A")

    @property
    def r(self) -> int:
        return len(self.edges)


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def fd_matrix(x, y, metric: FdMetric | str) -> np.ndarray:
    """All FD values between rows of ``x`` and rows of ``y`` (float64)."""
    metric = FdMetric.parse(metric)
    x, y = _as_f64(x), _as_f64(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"incompatible embedding shapes {x.shape} and {y.shape}")
    if metric is FdMetric.COSINE:
        norms = np.linalg.norm(x, axis=1)[:, None] * np.linalg.norm(y, axis=1)[None, :]
        return 1.0 - (x @ y.T) / np.maximum(norms, NORM_FLOOR)
    diff = x[:, None, :] - y[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(sq) if metric is FdMetric.EUCLIDEAN else sq


def feature_divergence(x, y, metric: FdMetric | str = FdMetric.COSINE) -> float:
    x, y = _as_f64(x).ravel(), _as_f64(y).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return float(np.float32(fd_matrix(x[None], y[None], metric)[0, 0]))


def alternating_split(window_tokens: Sequence) -> tuple[list, list]:
    """Odd 1-based positions go to A, even positions to B."""
    tokens = list(window_tokens)
    return tokens[0::2], tokens[1::2]


def removal_count(v: int, rho: float, n_a: int, rule: str = "ratio") -> int:
    """Tokens to remove from a window of ``v`` tokens, capped at ``|A|``.

    ``rule="ratio"`` removes floor(rho*v); ``rule="half-pairs"`` uses floor(rho*v/2).
    """
    if rule == "ratio":
        r = int(np.floor(rho * v + 1e-9))
    elif rule == "half-pairs":
        r = int(np.floor(rho * v / 2 + 1e-9))
    else:
        raise ValueError(f"unknown removal rule {rule!r}")
    return max(0, min(r, n_a))


def build_plan_bipartite(
    x, a_indices: Sequence[int], b_indices: Sequence[int], metric: FdMetric | str, r: int
) -> MergePlan:
    """Per-A best match into B, keep the ``r`` lowest-FD candidate edges.

    Ties go to the lowest index, both when choosing the B partner and when
    ranking candidates.
    """
    x = np.asarray(x)
    a = tuple(int(i) for i in a_indices)
    b = tuple(int(i) for i in b_indices)
    if r < 0 or r > len(a):
        raise InfeasibleRemovalError(f"cannot remove {r} tokens from |A|={len(a)}")
    if r > 0 and not b:
        raise InfeasibleRemovalError("B is empty but removals were requested")
    kept_all = tuple(sorted(a + b))
    if r == 0:
        return MergePlan(a, b, (), frozenset(), kept_all)

    fd = fd_matrix(x[list(a)], x[list(b)], metric)
    best_col = np.argmin(fd, axis=1)  # first minimum: lowest B index on ties
    best_fd = fd[np.arange(len(a)), best_col]
    a_arr = np.asarray(a)
    rank = np.lexsort((a_arr, best_fd))[:r]
    edges = tuple((int(a_arr[k]), int(b[best_col[k]])) for k in rank)
    removed = frozenset(src for src, _ in edges)
    kept = tuple(i for i in kept_all if i not in removed)
    return MergePlan(
        a, b, edges, removed, kept,
        edge_fd=tuple(float(best_fd[k]) for k in rank),
        comparisons=len(a) * len(b),
    )


def build_plan_pairwise(x, metric: FdMetric | str, r: int) -> MergePlan:
    """Greedy disjoint matching over all token pairs in ascending FD order.

    The earlier token of each selected pair is merged into the later one.
    """
    x = np.asarray(x)
    v = x.shape[0]
    if r < 0 or r > v // 2:
        raise InfeasibleRemovalError(f"cannot form {r} disjoint pairs from {v} tokens")
    everything = tuple(range(v))
    if r == 0:
        return MergePlan((), everything, (), frozenset(), everything)

    fd = fd_matrix(x, x, metric)
    iu, ju = np.triu_indices(v, k=1)
    vals = fd[iu, ju]
    order = np.lexsort((ju, iu, vals))
    used: set[int] = set()
    edges, edge_fd = [], []
    for k in order:
        i, j = int(iu[k]), int(ju[k])
        if i in used or j in used:
            continue
        used.update((i, j))
        edges.append((i, j))
        edge_fd.append(float(vals[k]))
        if len(edges) == r:
            break
    removed = frozenset(i for i, _ in edges)
    a = tuple(sorted(removed))
    b = tuple(i for i in everything if i not in removed)
    return MergePlan(a, b, tuple(edges), removed, b, tuple(edge_fd), comparisons=len(vals))


def comparison_count(v: int, mode: MatchingMode | str) -> int:
    if v < 2:
        return 0
    mode = MatchingMode(mode)
    if mode is MatchingMode.PAIRWISE:
        return v * (v - 1) // 2
    return ((v + 1) // 2) * (v // 2)
