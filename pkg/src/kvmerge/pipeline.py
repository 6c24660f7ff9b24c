"""Prefill with hierarchical between-layer compression of vision tokens."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ScheduleError
from .grid import Survivors, TokenGrid, check_provenance, partition_windows
from .guidance import (
    AttentionTensor,
    PromptGuidance,
    accumulate_prompt_attention,
    random_guidance,
    uniform_guidance,
)
from .matching import (
    FdMetric,
    MatchingMode,
    alternating_split,
    build_plan_bipartite,
    build_plan_pairwise,
    removal_count,
)
from .merge import merged_sequence, window_survivors
from .numerics import Matrix, SeededStream, stream_next_u64
from .simulator import (
    PIPELINE_SALT,
    DecoderConfig,
    SequenceLayout,
    embed_sequence,
    init_weights,
    layer_forward,
)

MAX_RATIO = 0.5
GUIDANCE_MODES = ("prompt", "uniform", "random")
SCOPES = ("hierarchical", "global-only", "local-only")
EVICTIONS = ("merge", "random-evict")
REMOVAL_RULES = ("ratio", "half-pairs")


@dataclass(frozen=True)
class Schedule:
    """Layers after which to compress (1-based), per-axis window counts, removal ratios."""

    lambdas: tuple[int, ...] = ()
    windows: tuple[int, ...] = ()
    ratios: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(int(x) for x in self.lambdas))
        object.__setattr__(self, "windows", tuple(int(x) for x in self.windows))
        object.__setattr__(self, "ratios", tuple(float(x) for x in self.ratios))

    @property
    def steps(self) -> int:
        return len(self.lambdas)


@dataclass(frozen=True)
class Strategy:
    guidance: str = "prompt"
    metric: FdMetric = FdMetric.COSINE
    matching: MatchingMode = MatchingMode.BIPARTITE
    scope: str = "hierarchical"
    eviction: str = "merge"

    def __post_init__(self):
        object.__setattr__(self, "metric", FdMetric.parse(self.metric))
        object.__setattr__(self, "matching", MatchingMode(self.matching))
        for name, allowed in (
            ("guidance", GUIDANCE_MODES),
            ("scope", SCOPES),
            ("eviction", EVICTIONS),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"strategy.{name} must be one of {allowed}, got {getattr(self, name)!r}")


@dataclass
class ScheduleCheck:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_schedule(schedule: Schedule, n_layers: int, grid_hw: tuple[int, int] | None = None) -> ScheduleCheck:
    """Collect every violation instead of stopping at the first one."""
    check = ScheduleCheck()
    lam, win, rho = schedule.lambdas, schedule.windows, schedule.ratios
    if not (len(lam) == len(win) == len(rho)):
        check.errors.append(
            f"schedule lists differ in length: layers={len(lam)}, windows={len(win)}, ratios={len(rho)}"
        )
    for i, l in enumerate(lam):
        if not 1 <= l < n_layers:
            check.errors.append(f"layers[{i}]={l} outside [1, {n_layers - 1}] for L={n_layers}")
    for i in range(1, len(lam)):
        if lam[i] <= lam[i - 1]:
            check.errors.append(f"layers must be strictly increasing: layers[{i - 1}]={lam[i - 1]} >= layers[{i}]={lam[i]}")
    for i, r in enumerate(rho):
        if not 0 < r <= MAX_RATIO:
            check.errors.append(f"ratios[{i}]={r} outside (0, {MAX_RATIO}]: at most 50% removal per step")
    limit = min(grid_hw) if grid_hw else None
    for i, w in enumerate(win):
        if w < 1:
            check.errors.append(f"windows[{i}]={w} must be >= 1")
        elif limit is not None and w > limit:
            check.errors.append(f"windows[{i}]={w} exceeds the grid's shorter side {limit}")
    for i in range(1, len(win)):
        if win[i] > win[i - 1]:
            check.errors.append(f"windows must be non-increasing: windows[{i - 1}]={win[i - 1]} < windows[{i}]={win[i]}")
        elif win[i] == win[i - 1]:
            check.warnings.append(f"windows[{i - 1}] == windows[{i}] = {win[i]}: scope does not widen")
    return check


def effective_windows(schedule: Schedule, scope: str) -> tuple[int, ...]:
    if scope == "global-only":
        return tuple(1 for _ in schedule.windows)
    if scope == "local-only" and schedule.windows:
        return tuple(schedule.windows[0] for _ in schedule.windows)
    return schedule.windows


@dataclass(frozen=True)
class StageReport:
    layer: int
    windows: int
    ratio: float
    tokens_before: int
    tokens_after: int
    window_sizes: tuple[int, ...]
    removed_per_window: tuple[int, ...]
    comparisons: int
    fd_sum: float
    n_edges: int
    guidance_mass_retained: float

    @property
    def mean_fd(self) -> float | None:
        return self.fd_sum / self.n_edges if self.n_edges else None

    @property
    def divisible(self) -> bool:
        """Every window removed exactly ratio * size tokens (no flooring)."""
        return all(
            abs(self.ratio * v - r) < 1e-9
            for v, r in zip(self.window_sizes, self.removed_per_window)
        )


def stage_guidance(
    strategy: Strategy,
    n: int,
    attention: AttentionTensor | None,
    vision_start: int,
    prompt_indices: Sequence[int],
    stream: SeededStream,
) -> tuple[PromptGuidance, SeededStream]:
    if strategy.guidance == "uniform":
        return uniform_guidance(n), stream
    if strategy.guidance == "random":
        return random_guidance(n, stream)
    if attention is None:
        raise ValueError("prompt guidance needs an attention tensor")
    return accumulate_prompt_attention(attention, (vision_start, vision_start + n), prompt_indices), stream


def _evict(window_len: int, r: int, stream: SeededStream) -> tuple[list[int], SeededStream]:
    """Partial Fisher-Yates: ``r`` distinct positions out of ``window_len``."""
    pool = list(range(window_len))
    for k in range(r):
        u, stream = stream_next_u64(stream)
        j = k + u % (window_len - k)
        pool[k], pool[j] = pool[j], pool[k]
    return sorted(pool[:r]), stream


def compress_stage(
    grid: TokenGrid,
    attention: AttentionTensor | None,
    w: int,
    rho: float,
    strategy: Strategy,
    stream: SeededStream,
    *,
    vision_start: int = 0,
    prompt_indices: Sequence[int] = (),
    removal_rule: str = "ratio",
    layer: int = 0,
) -> tuple[TokenGrid, StageReport, SeededStream, frozenset[int]]:
    """One compression step. Returns the new grid, a report, the advanced stream and evicted cells."""
    windows = partition_windows(grid, w)
    guidance, stream = stage_guidance(
        strategy, grid.n_tokens, attention, vision_start, prompt_indices, stream
    )
    if attention is not None:
        reference = accumulate_prompt_attention(
            attention, (vision_start, vision_start + grid.n_tokens), prompt_indices
        ).xi.astype(np.float64)
    else:
        reference = guidance.xi.astype(np.float64)
    # share of each token's content that survives: 1 untouched, mixing weight if merged, 0 if evicted
    share = np.ones(grid.n_tokens)
    parts: list[Survivors] = []
    sizes, removed, evicted_cells = [], [], set()
    comparisons, fd_sum, n_edges = 0, 0.0, 0
    for win in windows:
        idx = list(win.token_indices)
        v = len(idx)
        a_local, b_local = alternating_split(range(v))
        r = removal_count(v, rho, len(a_local), removal_rule)
        sizes.append(v)
        removed.append(r)
        if strategy.eviction == "random-evict":
            drop, stream = _evict(v, r, stream)
            drop_set = set(drop)
            keep = [k for k in range(v) if k not in drop_set]
            for k in drop:
                evicted_cells |= grid.provenance[idx[k]]
                share[idx[k]] = 0.0
            parts.append(
                Survivors(
                    tuple(idx[k] for k in keep),
                    grid.embeddings.data[[idx[k] for k in keep]],
                    tuple(grid.provenance[idx[k]] for k in keep),
                )
            )
            continue
        x = grid.embeddings.data[idx]
        if strategy.matching is MatchingMode.PAIRWISE:
            plan = build_plan_pairwise(x, strategy.metric, r)
        else:
            plan = build_plan_bipartite(x, a_local, b_local, strategy.metric, r)
        comparisons += plan.comparisons
        fd_sum += float(sum(plan.edge_fd))
        n_edges += plan.r
        xi_win = guidance.take(idx).astype(np.float64)
        groups: dict[int, list[int]] = {}
        for src, dst in plan.edges:
            groups.setdefault(dst, [dst]).append(src)
        for members in groups.values():
            w_mem = xi_win[members]
            share[[idx[m] for m in members]] = w_mem / w_mem.sum()
        parts.append(window_survivors(grid, win, plan, guidance.take(idx)))

    new_grid = merged_sequence(grid, parts)
    mass = float((reference * share).sum() / reference.sum())
    report = StageReport(
        layer=layer,
        windows=w,
        ratio=rho,
        tokens_before=grid.n_tokens,
        tokens_after=new_grid.n_tokens,
        window_sizes=tuple(sizes),
        removed_per_window=tuple(removed),
        comparisons=comparisons,
        fd_sum=fd_sum,
        n_edges=n_edges,
        guidance_mass_retained=mass,
    )
    return new_grid, report, stream, frozenset(evicted_cells)


@dataclass(frozen=True)
class PrefillTrace:
    config: DecoderConfig
    layout: SequenceLayout
    schedule: Schedule
    strategy: Strategy
    per_layer_vision_tokens: tuple[int, ...]
    prompt_tokens: int
    stages: tuple[StageReport, ...]
    grid: TokenGrid
    final_hidden: Matrix
    evicted: frozenset[int] = frozenset()

    @property
    def token_layers(self) -> int:
        return sum(self.per_layer_vision_tokens)

    @property
    def provenance(self) -> tuple[frozenset[int], ...]:
        return self.grid.provenance

    @property
    def comparison_ops(self) -> int:
        return sum(s.comparisons for s in self.stages)


def run_prefill(
    config: DecoderConfig,
    layout: SequenceLayout,
    schedule: Schedule,
    strategy: Strategy = Strategy(),
    *,
    vision=None,
    removal_rule: str = "ratio",
) -> PrefillTrace:
    """Run all ``config.layers`` layers, compressing after each scheduled layer.

    Prompt tokens are never touched. The attention emitted by the scheduled
    layer itself feeds prompt guidance.
    """
    check = validate_schedule(schedule, config.layers, (layout.height, layout.width))
    if not check.ok:
        raise ScheduleError(check.errors)
    if removal_rule not in REMOVAL_RULES:
        raise ValueError(f"removal_rule must be one of {REMOVAL_RULES}")

    weights = init_weights(config)
    hidden = embed_sequence(layout, config, vision).data
    p1, p2 = layout.prompt_pre, layout.prompt_post
    v = layout.vision_tokens
    grid = TokenGrid.from_array(hidden[p1 : p1 + v], layout.height, layout.width)
    stream = SeededStream(config.seed ^ PIPELINE_SALT)
    windows = effective_windows(schedule, strategy.scope)
    stage_at = {l: i for i, l in enumerate(schedule.lambdas)}

    counts, stages, evicted = [], [], frozenset()
    for layer in range(1, config.layers + 1):
        out, attn = layer_forward(hidden, weights, layer - 1)
        hidden = out.data
        n_vis = hidden.shape[0] - p1 - p2
        counts.append(n_vis)
        if layer not in stage_at:
            continue
        i = stage_at[layer]
        grid = grid.with_embeddings(hidden[p1 : p1 + n_vis])
        prompt_idx = list(range(p1)) + list(range(p1 + n_vis, p1 + n_vis + p2))
        grid, report, stream, dropped = compress_stage(
            grid,
            attn,
            windows[i],
            schedule.ratios[i],
            strategy,
            stream,
            vision_start=p1,
            prompt_indices=prompt_idx,
            removal_rule=removal_rule,
            layer=layer,
        )
        evicted = evicted | dropped
        stages.append(report)
        hidden = np.concatenate([hidden[:p1], grid.embeddings.data, hidden[p1 + n_vis :]])

    n_vis = hidden.shape[0] - p1 - p2
    grid = grid.with_embeddings(hidden[p1 : p1 + n_vis])
    check_provenance(grid.provenance, grid.n_cells, evicted)
    return PrefillTrace(
        config=config,
        layout=layout,
        schedule=replace(schedule, windows=windows),
        strategy=strategy,
        per_layer_vision_tokens=tuple(counts),
        prompt_tokens=p1 + p2,
        stages=tuple(stages),
        grid=grid,
        final_hidden=Matrix.from_array(hidden),
        evicted=evicted,
    )
