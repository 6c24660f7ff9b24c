"""Command-line front end: ``kvmerge {compress,profile,search,ablate}``.

Exit codes: 0 success, 2 config/validation error, 3 IO/format error,
4 infeasible schedule search.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import DEFAULTS, RunConfig, parse_config
from .errors import ConfigError, FormatError, InfeasibleScheduleError, ScheduleError, ShapeError
from .io import (
    pgm_bytes,
    atomic_write_bytes,
    provenance_heatmap,
    read_token_tensor,
    write_csv,
    write_json,
)
from .pipeline import EVICTIONS, GUIDANCE_MODES, SCOPES, PrefillTrace, Schedule, Strategy, run_prefill, validate_schedule
from .profiler import (
    PRESETS,
    ModelShape,
    cost_report,
    default_windows,
    closed_form_terms,
    retention,
    schedule_search,
    simulation_gap_bound,
    tokens_remaining,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 2, 3, 4

AXES = {
    "guidance": GUIDANCE_MODES,
    "metric": ("cosine", "euclidean", "l2sq"),
    "matching": ("bipartite", "pairwise"),
    "scope": SCOPES,
    "eviction": EVICTIONS,
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def desk_shape(cfg: RunConfig) -> ModelShape:
    d = cfg.decoder
    return ModelShape(d.layers, d.dim, d.ff_dim, d.heads, kv_dtype_bytes=4, prompt_len=cfg.layout.prompt_tokens)


def load_input(cfg: RunConfig, path):
    """Vision embeddings from an LKVT file; the file's grid replaces the configured one."""
    if path is None:
        return cfg, None
    matrix, height, width = read_token_tensor(path)
    if matrix.cols != cfg.decoder.dim:
        raise ShapeError(f"input tensor dim {matrix.cols} != config dim {cfg.decoder.dim}")
    cfg = cfg.with_grid(height, width)
    check = validate_schedule(cfg.schedule, cfg.decoder.layers, (height, width))
    if not check.ok:
        raise ScheduleError(check.errors)
    return cfg, matrix.data


def trace_report(cfg: RunConfig, trace: PrefillTrace) -> dict:
    v = cfg.layout.vision_tokens
    sched = trace.schedule
    cost = cost_report(v, sched, desk_shape(cfg), trace.per_layer_vision_tokens, trace.comparison_ops)
    exact_left = tokens_remaining(v, sched.ratios)
    digest = hashlib.sha256(trace.final_hidden.data.tobytes()).hexdigest()
    return {
        "version": __version__,
        "seed": cfg.seed,
        "decoder": {"layers": cfg.decoder.layers, "heads": cfg.decoder.heads, "dim": cfg.decoder.dim, "ff_dim": cfg.decoder.ff_dim},
        "layout": {"prompt_pre": cfg.layout.prompt_pre, "grid": [cfg.layout.height, cfg.layout.width], "prompt_post": cfg.layout.prompt_post},
        "schedule": {"layers": list(sched.lambdas), "windows": list(sched.windows), "ratios": list(sched.ratios), "removal_rule": cfg.removal_rule},
        "strategy": {
            "guidance": trace.strategy.guidance,
            "metric": trace.strategy.metric.value,
            "matching": trace.strategy.matching.value,
            "scope": trace.strategy.scope,
            "eviction": trace.strategy.eviction,
        },
        "per_layer_vision_tokens": list(trace.per_layer_vision_tokens),
        "prompt_tokens": trace.prompt_tokens,
        "final_vision_tokens": trace.grid.n_tokens,
        "tokens_remaining_exact": str(exact_left),
        "token_layers": trace.token_layers,
        "closed_form_token_layers": cost.closed_form_token_layers,
        "retention_closed_form": cost.retention_ratio,
        "retention_simulated": trace.token_layers / (v * cfg.decoder.layers),
        "gap_bound": simulation_gap_bound(sched.windows, cfg.decoder.layers, sched.lambdas),
        "flops_estimate": cost.flops_estimate,
        "kv_bytes_estimate": cost.kv_bytes_estimate,
        "comparison_ops": trace.comparison_ops,
        "evicted_cells": len(trace.evicted),
        "final_hidden_sha256": digest,
        "stages": [
            {
                "layer": s.layer,
                "windows": s.windows,
                "ratio": s.ratio,
                "tokens_before": s.tokens_before,
                "tokens_after": s.tokens_after,
                "window_sizes": list(s.window_sizes),
                "removed_per_window": list(s.removed_per_window),
                "comparisons": s.comparisons,
                "mean_fd": s.mean_fd,
                "guidance_mass_retained": s.guidance_mass_retained,
            }
            for s in trace.stages
        ],
    }


def write_compress_outputs(out_dir, cfg: RunConfig, trace: PrefillTrace) -> None:
    out = Path(out_dir)
    write_json(out / "report.json", trace_report(cfg, trace))

    by_layer = {s.layer: s for s in trace.stages}
    rows = []
    for layer, n in enumerate(trace.per_layer_vision_tokens, start=1):
        s = by_layer.get(layer)
        rows.append([
            layer, n, trace.prompt_tokens,
            int(s is not None),
            s.windows if s else None,
            s.ratio if s else None,
            s.tokens_before - s.tokens_after if s else None,
            s.comparisons if s else None,
            s.mean_fd if s else None,
            s.guidance_mass_retained if s else None,
        ])
    write_csv(
        out / "report.csv",
        ["layer", "vision_tokens", "prompt_tokens", "compress_after", "windows", "ratio",
         "removed", "comparisons", "mean_fd", "guidance_mass_retained"],
        rows,
    )

    w = trace.grid.width
    prov = {
        str(i): [[c // w, c % w] for c in sorted(cells)]
        for i, cells in enumerate(trace.provenance)
    }
    write_json(out / "provenance.json", prov, sort_keys=False)
    px = provenance_heatmap(trace.provenance, trace.grid.height, trace.grid.width)
    atomic_write_bytes(out / "heatmap.pgm", pgm_bytes(px))


def cmd_compress(args) -> int:
    cfg = load_run_config(args)
    cfg, vision = load_input(cfg, args.input or cfg.input)
    trace = run_prefill(cfg.decoder, cfg.layout, cfg.schedule, cfg.strategy, vision=vision, removal_rule=cfg.removal_rule)
    out = args.out or cfg.out or "out"
    write_compress_outputs(out, cfg, trace)
    counts = trace.per_layer_vision_tokens
    print(f"vision tokens per layer: {list(counts)}")
    print(f"final vision tokens: {trace.grid.n_tokens} of {cfg.layout.vision_tokens}")
    print(f"wrote report.json, report.csv, provenance.json, heatmap.pgm to {out}")
    return EXIT_OK


def _profile_schedule(args, cfg: RunConfig | None, n_layers: int) -> Schedule:
    if args.lambdas is not None:
        lam = _int_list(args.lambdas)
        rho = _float_list(args.ratios) if args.ratios is not None else tuple(0.5 for _ in lam)
        win = _int_list(args.windows) if args.windows is not None else default_windows(len(lam)) if lam else ()
        return Schedule(lam, win, rho)
    if cfg is not None and args.config:
        return cfg.schedule
    if args.preset:
        # no schedule given for a preset: profile the vanilla model
        return Schedule()
    return RunConfig().schedule


def cmd_profile(args) -> int:
    cfg = load_run_config(args)
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; known: {sorted(PRESETS)}", "--preset")
        preset = PRESETS[args.preset]
        shape, v = preset.shape, preset.vision_tokens
        if args.prompt_len is not None:
            shape = replace(shape, prompt_len=args.prompt_len)
    else:
        shape, v = desk_shape(cfg), cfg.layout.vision_tokens
    sched = _profile_schedule(args, cfg, shape.layers)
    check = validate_schedule(sched, shape.layers)
    if not check.ok:
        for e in check.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    report = cost_report(v, sched, shape)
    vanilla = cost_report(v, Schedule(), shape)
    terms = closed_form_terms(v, shape.layers, sched.lambdas, sched.ratios)
    print(f"model: L={shape.layers} d={shape.dim} d_ff={shape.ff_dim} v={v} prompt={shape.prompt_len}")
    print(f"schedule: layers={list(sched.lambdas)} windows={list(sched.windows)} ratios={list(sched.ratios)}")
    print(f"closed-form token-layers: {float(sum(terms)):.6g} (vanilla {v * shape.layers})")
    print(f"  term (1) before first step: {float(terms[0]):.6g}")
    print(f"  term (2) between steps:     {float(terms[1]):.6g}")
    print(f"  term (3) after last step:   {float(terms[2]):.6g}")
    print(f"retention: {100 * report.retention_ratio:.6g}%")
    print(f"final vision tokens (exact): {tokens_remaining(v, sched.ratios)}")
    print(f"flops estimate: {report.flops_estimate:.6g} (vanilla {vanilla.flops_estimate:.6g}, ratio {report.flops_estimate / vanilla.flops_estimate:.4f})")
    print(f"kv bytes estimate: {report.kv_bytes_estimate} (vanilla {vanilla.kv_bytes_estimate}, ratio {report.kv_bytes_estimate / vanilla.kv_bytes_estimate:.4f})")
    result = {"model": {"layers": shape.layers, "dim": shape.dim, "ff_dim": shape.ff_dim, "vision_tokens": v, "prompt_len": shape.prompt_len},
              "compressed": report.as_dict(), "vanilla": vanilla.as_dict(),
              "terms": [float(t) for t in terms]}

    if args.simulate:
        sim_cfg = cfg
        if args.preset:
            grid = PRESETS[args.preset].grid or (cfg.layout.height, cfg.layout.width)
            sim_cfg = replace(cfg.with_grid(*grid), decoder=replace(cfg.decoder, layers=shape.layers))
        trace = run_prefill(sim_cfg.decoder, sim_cfg.layout, sched, cfg.strategy, removal_rule=cfg.removal_rule)
        v_sim = sim_cfg.layout.vision_tokens
        closed = float(sum(closed_form_terms(v_sim, shape.layers, sched.lambdas, sched.ratios)))
        gap = trace.token_layers - closed
        bound = simulation_gap_bound(sched.windows, shape.layers, sched.lambdas)
        print(f"simulated (grid {sim_cfg.layout.height}x{sim_cfg.layout.width}, d={sim_cfg.decoder.dim}): "
              f"token-layers {trace.token_layers} vs closed form {closed:.6g}, gap {gap:.6g} (bound {bound})")
        result["simulated"] = {"token_layers": trace.token_layers, "closed_form": closed, "gap": gap, "bound": bound,
                               "per_layer_vision_tokens": list(trace.per_layer_vision_tokens)}
    if args.out:
        write_json(Path(args.out), result)
    return EXIT_OK


def cmd_search(args) -> int:
    n_layers = args.num_layers
    if args.preset:
        n_layers = PRESETS[args.preset].shape.layers
    if n_layers is None:
        raise UsageError("search needs --num-layers or --preset")
    try:
        sched = schedule_search(
            n_layers, args.target_retention, args.steps, args.lambda_min,
            ratio_step=args.ratio_step, allow_empty=args.allow_empty,
        )
    except InfeasibleScheduleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    ret = retention(n_layers, sched.lambdas, sched.ratios)
    terms = closed_form_terms(1, n_layers, sched.lambdas, sched.ratios)
    print(f"layers: {list(sched.lambdas)}")
    print(f"windows: {list(sched.windows)}")
    print(f"ratios: {list(sched.ratios)}")
    print(f"retention: {ret:.6f} (target {args.target_retention}, |diff| {abs(ret - args.target_retention):.6f})")
    print(f"per-token layer terms: (1) {float(terms[0]):.6g}  (2) {float(terms[1]):.6g}  (3) {float(terms[2]):.6g}")
    return EXIT_OK


def ablation_rows(cfg: RunConfig, axes: list[str], vision=None) -> tuple[list[str], list[list]]:
    base = cfg.strategy
    base_values = {
        "guidance": base.guidance,
        "metric": base.metric.value,
        "matching": base.matching.value,
        "scope": base.scope,
        "eviction": base.eviction,
    }
    header = list(AXES) + [
        "final_tokens", "token_layers", "comparison_ops", "mean_fd", "guidance_mass_retained",
    ]
    rows = []
    for combo in itertools.product(*(AXES[a] for a in axes)):
        values = {**base_values, **dict(zip(axes, combo))}
        strategy = Strategy(**values)
        trace = run_prefill(cfg.decoder, cfg.layout, cfg.schedule, strategy, vision=vision, removal_rule=cfg.removal_rule)
        n_edges = sum(s.n_edges for s in trace.stages)
        mean_fd = sum(s.fd_sum for s in trace.stages) / n_edges if n_edges else None
        mass = (
            sum(s.guidance_mass_retained for s in trace.stages) / len(trace.stages)
            if trace.stages else 1.0
        )
        rows.append([values[a] for a in AXES] + [
            trace.grid.n_tokens, trace.token_layers, trace.comparison_ops, mean_fd, mass,
        ])
    return header, rows


def cmd_ablate(args) -> int:
    axes = [a.strip() for a in (args.axes or "").split(",") if a.strip()]
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise UsageError(f"unknown axis {unknown[0]!r}; choose from {', '.join(AXES)}")
    axes = list(dict.fromkeys(axes))
    cfg = load_run_config(args)
    cfg, vision = load_input(cfg, args.input or cfg.input)
    header, rows = ablation_rows(cfg, axes, vision)
    out = Path(args.out or cfg.out or "out")
    write_csv(out / "ablation.csv", header, rows)
    print(",".join(header))
    for row in rows:
        print(",".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    defaults = ", ".join(f"{k}={v}" for k, v in DEFAULTS.items() if v is not None)
    parser = argparse.ArgumentParser(
        prog="kvmerge",
        description="Prompt-guided vision-token merging with hierarchical window schedules.",
        epilog=f"config defaults: {defaults}",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="run a compressed prefill and write reports")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--input", help="LKVT vision tensor (overrides the synthetic field)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("profile", help="closed-form token-layer, FLOPs and KV accounting")
    p.add_argument("--config")
    p.add_argument("--preset", help=f"model shape preset: {', '.join(PRESETS)}")
    p.add_argument("--lambdas", help="comma-separated compression layers, e.g. 10,20,30")
    p.add_argument("--ratios", help="comma-separated removal ratios (default 0.5 each)")
    p.add_argument("--windows", help="comma-separated window counts per axis")
    p.add_argument("--prompt-len", type=int, help="prompt tokens for FLOPs/KV (preset default 64)")
    p.add_argument("--simulate", action="store_true", help="cross-check against a desk-scale simulation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the profile as JSON to this file")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("search", help="find a schedule for a target retention")
    p.add_argument("--num-layers", type=int, help="decoder layers L")
    p.add_argument("--preset")
    p.add_argument("--target-retention", type=float, required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--lambda-min", type=int, default=1)
    p.add_argument("--ratio-step", type=float, default=0.05)
    p.add_argument("--allow-empty", action="store_true", help="return the empty schedule for target ~1")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("ablate", help="cross product of strategy variants, one CSV row each")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--axes", default="", help=f"comma-separated subset of {', '.join(AXES)}")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScheduleError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleScheduleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
