"""Closed-form and simulated cost accounting for compression schedules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InfeasibleScheduleError, ScheduleError
from .pipeline import MAX_RATIO, Schedule, validate_schedule

TIE_BAND = 0.005


@dataclass(frozen=True)
class ModelShape:
    layers: int
    dim: int
    ff_dim: int
    heads: int
    kv_dtype_bytes: int = 2
    prompt_len: int = 64


@dataclass(frozen=True)
class Preset:
    shape: ModelShape
    vision_tokens: int
    grid: tuple[int, int] | None = None


PRESETS = {
    "llava15-7b": Preset(ModelShape(32, 4096, 11008, 32), 576, (24, 24)),
    "llava15-13b": Preset(ModelShape(40, 5120, 13824, 40), 576, (24, 24)),
    "llava-next-13b": Preset(ModelShape(40, 5120, 13824, 40), 2144),
}


@dataclass(frozen=True)
class CostReport:
    per_layer_vision_tokens: tuple[int, ...]
    token_layers: int
    closed_form_token_layers: float
    retention_ratio: float
    flops_estimate: float
    kv_bytes_estimate: int
    comparison_ops: int = 0

    def as_dict(self) -> dict:
        return {
            "per_layer_vision_tokens": list(self.per_layer_vision_tokens),
            "token_layers": self.token_layers,
            "closed_form_token_layers": self.closed_form_token_layers,
            "retention_ratio": self.retention_ratio,
            "flops_estimate": self.flops_estimate,
            "kv_bytes_estimate": self.kv_bytes_estimate,
            "comparison_ops": self.comparison_ops,
        }


def _frac(x: float) -> Fraction:
    return Fraction(x).limit_denominator(1_000_000)


def _check_layers(n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> None:
    sched = Schedule(tuple(lambdas), tuple(1 for _ in lambdas), tuple(ratios))
    check = validate_schedule(sched, n_layers)
    if not check.ok:
        raise ScheduleError(check.errors)


def closed_form_terms(v: int, n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> tuple[Fraction, Fraction, Fraction]:
    """The three token-layer terms: before the first step, between steps, after the last."""
    _check_layers(n_layers, lambdas, ratios)
    if not lambdas:
        return Fraction(v * n_layers), Fraction(0), Fraction(0)
    keep = [1 - _frac(r) for r in ratios]
    before = Fraction(v * lambdas[0])
    between = Fraction(0)
    surv = Fraction(1)
    for i in range(1, len(lambdas)):
        surv *= keep[i - 1]
        between += (lambdas[i] - lambdas[i - 1]) * surv
    after = (n_layers - lambdas[-1]) * surv * keep[-1]
    return before, v * between, v * after


def token_layers_closed_form_exact(v: int, n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> Fraction:
    return sum(closed_form_terms(v, n_layers, lambdas, ratios), Fraction(0))


def token_layers_closed_form(v: int, n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> float:
    return float(token_layers_closed_form_exact(v, n_layers, lambdas, ratios))


def retention(n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> float:
    return float(token_layers_closed_form_exact(1, n_layers, lambdas, ratios) / n_layers)


def tokens_remaining(v: int, ratios: Sequence[float]) -> Fraction:
    for r in ratios:
        if not 0 < r <= MAX_RATIO:
            raise ScheduleError([f"ratio {r} outside (0, {MAX_RATIO}]"])
    out = Fraction(v)
    for r in ratios:
        out *= 1 - _frac(r)
    return out


def layer_counts_closed_form(v: int, n_layers: int, lambdas: Sequence[int], ratios: Sequence[float]) -> list[Fraction]:
    """Exact per-layer vision counts implied by the schedule (layers 1..L)."""
    _check_layers(n_layers, lambdas, ratios)
    counts, cur, step = [], Fraction(v), 0
    for layer in range(1, n_layers + 1):
        counts.append(cur)
        if step < len(lambdas) and layer == lambdas[step]:
            cur *= 1 - _frac(ratios[step])
            step += 1
    return counts


def simulation_gap_bound(windows: Sequence[int], n_layers: int, lambdas: Sequence[int]) -> int:
    """Upper bound on simulated minus closed-form token-layers.

    Each window floors away less than one token per step, and that surplus
    carries into later steps, so the excess after step i is below
    sum_{j<=i} w_j^2.
    """
    bound, carried = 0, 0
    ends = list(lambdas[1:]) + [n_layers]
    for w, start, end in zip(windows, lambdas, ends):
        carried += w * w
        bound += carried * (end - start)
    return bound


def estimate_flops(per_layer_counts: Sequence[int], shape: ModelShape, prompt_len: int | None = None) -> float:
    """Dense-transformer forward FLOPs: projections 8td^2, attention 4t^2 d, MLP 4t d d_ff.

    A rough estimate, not a measured count.
    """
    p = shape.prompt_len if prompt_len is None else prompt_len
    d, f = float(shape.dim), float(shape.ff_dim)
    total = 0.0
    for n in per_layer_counts:
        t = float(n) + p
        total += t * 8 * d * d + 4 * t * t * d + t * 4 * d * f
    return total


def estimate_kv_bytes(per_layer_counts: Sequence[int], shape: ModelShape, prompt_len: int | None = None) -> int:
    """Keys and values for every token held at every layer."""
    p = shape.prompt_len if prompt_len is None else prompt_len
    return int(sum(2 * (int(n) + p) * shape.dim * shape.kv_dtype_bytes for n in per_layer_counts))


def cost_report(
    v: int,
    schedule: Schedule,
    shape: ModelShape,
    per_layer_counts: Sequence[int] | None = None,
    comparison_ops: int = 0,
) -> CostReport:
    """Report for ``per_layer_counts`` (simulated), or the exact counts when omitted."""
    closed = token_layers_closed_form_exact(v, shape.layers, schedule.lambdas, schedule.ratios)
    if per_layer_counts is None:
        exact = layer_counts_closed_form(v, shape.layers, schedule.lambdas, schedule.ratios)
        flops = estimate_flops([float(c) for c in exact], shape)
        kv = int(sum(2 * (float(c) + shape.prompt_len) * shape.dim * shape.kv_dtype_bytes for c in exact))
        per_layer = tuple(int(round(float(c))) for c in exact)
        token_layers = int(round(float(closed)))
    else:
        per_layer = tuple(int(c) for c in per_layer_counts)
        flops = estimate_flops(per_layer, shape)
        kv = estimate_kv_bytes(per_layer, shape)
        token_layers = sum(per_layer)
    return CostReport(
        per_layer_vision_tokens=per_layer,
        token_layers=token_layers,
        closed_form_token_layers=float(closed),
        retention_ratio=float(closed / (v * shape.layers)),
        flops_estimate=flops,
        kv_bytes_estimate=kv,
        comparison_ops=comparison_ops,
    )


def ratio_grid(step: float = 0.05, lo: float = 0.1, hi: float = MAX_RATIO) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + k * step, 10) for k in range(n + 1)]


def default_windows(steps: int) -> tuple[int, ...]:
    return tuple(2 ** (steps - 1 - i) for i in range(steps))


def _retention_table(n_layers: int, lambdas: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Retention for every (lambda row, ratio-combination row) pair, shape (n_lam, n_rho)."""
    s = lambdas.shape[1]
    prod = np.cumprod(keep, axis=1)  # survivors after step i, per ratio combo
    total = np.repeat(lambdas[:, :1].astype(np.float64), keep.shape[0], axis=1)
    ends = np.concatenate([lambdas[:, 1:], np.full((lambdas.shape[0], 1), n_layers)], axis=1)
    for i in range(s):
        span = (ends[:, i] - lambdas[:, i]).astype(np.float64)
        total = total + span[:, None] * prod[None, :, i]
    return total / n_layers


def schedule_search(
    n_layers: int,
    target: float,
    steps: int,
    lambda_min: int = 1,
    *,
    ratio_step: float = 0.05,
    windows: Sequence[int] | None = None,
    allow_empty: bool = False,
) -> Schedule:
    """Grid search over layer and ratio schedules for a target retention.

    Picks the closest retention; among candidates within half a percentage
    point of that, the one with the latest first compression layer, then the
    closest, then the lexicographically smallest (layers, ratios).
    """
    if allow_empty and target >= 1.0 - TIE_BAND:
        return Schedule()
    if steps < 1 or lambda_min < 1:
        raise InfeasibleScheduleError("steps and lambda_min must be >= 1")
    layer_choices = list(itertools.combinations(range(lambda_min, n_layers), steps))
    if not layer_choices:
        raise InfeasibleScheduleError(
            f"no {steps} increasing layers fit in [{lambda_min}, {n_layers - 1}]", achievable=None
        )
    ratios = ratio_grid(ratio_step)
    rho_combos = list(itertools.product(ratios, repeat=steps))
    lam = np.asarray(layer_choices, dtype=np.int64)
    keep = 1.0 - np.asarray(rho_combos, dtype=np.float64)
    table = _retention_table(n_layers, lam, keep)
    lo, hi = float(table.min()), float(table.max())
    if target < lo - TIE_BAND or target > hi + TIE_BAND:
        raise InfeasibleScheduleError(
            f"target retention {target:.4f} outside achievable range [{lo:.4f}, {hi:.4f}]",
            achievable=(lo, hi),
        )
    dist = np.abs(table - target)
    best = float(dist.min())
    li, ri = np.nonzero(dist <= best + TIE_BAND + 1e-12)
    # itertools order is already lexicographic, so index order breaks the final tie
    key = np.lexsort((ri, li, dist[li, ri], -lam[li, 0]))
    k = key[0]
    win = tuple(windows) if windows is not None else default_windows(steps)
    return Schedule(tuple(int(x) for x in lam[li[k]]), win, tuple(rho_combos[ri[k]]))


def schedule_feasible(n_layers: int, target: float, schedule: Schedule, lambda_min: int = 1, ratio_step: float = 0.05) -> bool:
    """Whether ``schedule`` is in the search grid and within the tie band of ``target``."""
    grid = set(ratio_grid(ratio_step))
    if any(round(r, 10) not in grid for r in schedule.ratios):
        return False
    if not schedule.lambdas or schedule.lambdas[0] < lambda_min:
        return False
    if not validate_schedule(schedule, n_layers).ok:
        return False
    return abs(retention(n_layers, schedule.lambdas, schedule.ratios) - target) <= TIE_BAND
