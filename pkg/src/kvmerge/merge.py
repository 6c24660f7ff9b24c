"""Guidance-weighted message passing from A to B, deletion and reordering."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .grid import Survivors, TokenGrid, Window, reassemble
from .matching import MergePlan

DENOM_FLOOR = 1e-12


def apply_merge(
    x,
    plan: MergePlan,
    xi,
    provenance: Sequence[frozenset[int]] | None = None,
) -> tuple[np.ndarray, list[frozenset[int]]]:
    """Fold every edge source into its destination and drop the sources.

    Destination rows become ``(xi_b*x_b + sum xi_a*x_a) / (xi_b + sum xi_a)``;
    rows without incoming edges are returned untouched. Output rows follow
    ``plan.kept_order``.
    """
    x = np.asarray(x, dtype=np.float32)
    xi = np.asarray(xi, dtype=np.float64).ravel()
    v = x.shape[0]
    if xi.size != v:
        raise ShapeError(f"guidance length {xi.size} != window size {v}")
    if not np.all(xi > 0):
        raise DomainError("guidance weights must be positive")
    if provenance is None:
        provenance = [frozenset([i]) for i in range(v)]
    if len(provenance) != v:
        raise ShapeError("provenance length mismatch")

    incoming: dict[int, list[int]] = {}
    for src, dst in plan.edges:
        incoming.setdefault(dst, []).append(src)

    out = x.copy()
    prov = list(provenance)
    for dst, srcs in incoming.items():
        members = [dst] + srcs
        w = xi[members]
        num = (x[members].astype(np.float64) * w[:, None]).sum(axis=0)
        out[dst] = (num / max(w.sum(), DENOM_FLOOR)).astype(np.float32)
        prov[dst] = frozenset().union(*(provenance[m] for m in members))

    kept = list(plan.kept_order)
    return out[kept], [prov[k] for k in kept]


def window_survivors(grid: TokenGrid, window: Window, plan: MergePlan, xi) -> Survivors:
    """Run ``apply_merge`` on one window of ``grid`` and map back to grid token indices."""
    idx = list(window.token_indices)
    x = grid.embeddings.data[idx]
    prov = [grid.provenance[t] for t in idx]
    emb, new_prov = apply_merge(x, plan, xi, prov)
    return Survivors(tuple(idx[k] for k in plan.kept_order), emb, tuple(new_prov))


def merged_sequence(grid: TokenGrid, parts: Sequence[Survivors]) -> TokenGrid:
    return reassemble(grid, parts)
