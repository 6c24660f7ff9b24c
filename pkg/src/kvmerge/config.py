"""Run configuration: a JSON object, nested or with dotted keys.

Example::

    {"seed": 3, "grid": [16, 16],
     "schedule": {"layers": [2, 4, 6], "windows": [4, 2, 1], "ratios": [0.5, 0.5, 0.5]},
     "strategy": {"guidance": "prompt", "metric": "cosine"}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, ScheduleError
from .pipeline import (
    EVICTIONS,
    GUIDANCE_MODES,
    REMOVAL_RULES,
    SCOPES,
    Schedule,
    Strategy,
    validate_schedule,
)
from .profiler import PRESETS
from .simulator import DecoderConfig, SequenceLayout

DEFAULTS = {
    "seed": 0,
    "layers": 8,
    "heads": 4,
    "dim": 64,
    "ff_dim": 256,
    "grid": [16, 16],
    "prompt_pre": 8,
    "prompt_post": 8,
    "schedule.layers": [2, 4, 6],
    "schedule.windows": [4, 2, 1],
    "schedule.ratios": [0.5, 0.5, 0.5],
    "schedule.removal_rule": "ratio",
    "strategy.guidance": "prompt",
    "strategy.metric": "cosine",
    "strategy.matching": "bipartite",
    "strategy.scope": "hierarchical",
    "strategy.eviction": "merge",
    "preset": None,
    "input": None,
    "out": None,
}

CHOICES = {
    "schedule.removal_rule": REMOVAL_RULES,
    "strategy.guidance": GUIDANCE_MODES,
    "strategy.metric": ("cosine", "euclidean", "l2sq"),
    "strategy.matching": ("bipartite", "pairwise"),
    "strategy.scope": SCOPES,
    "strategy.eviction": EVICTIONS,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    layout: SequenceLayout = field(default_factory=SequenceLayout)
    schedule: Schedule = field(default_factory=lambda: Schedule((2, 4, 6), (4, 2, 1), (0.5, 0.5, 0.5)))
    strategy: Strategy = field(default_factory=Strategy)
    removal_rule: str = "ratio"
    preset: str | None = None
    input: str | None = None
    out: str | None = None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, decoder=replace(self.decoder, seed=seed))

    def with_grid(self, height: int, width: int) -> "RunConfig":
        return replace(self, layout=replace(self.layout, height=height, width=width))


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _int(key, value, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", key)
    if value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", key)
    return value


def _number_list(key, value, kind):
    if not isinstance(value, list):
        raise ConfigError(f"expected a list, got {value!r}", key)
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"expected numbers, got {item!r}", key)
        if kind is int and not float(item).is_integer():
            raise ConfigError(f"expected integers, got {item!r}", key)
        out.append(kind(item))
    return tuple(out)


def config_from_mapping(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}", unknown[0])
    values = {**DEFAULTS, **flat}

    for key, allowed in CHOICES.items():
        if values[key] not in allowed:
            raise ConfigError(f"must be one of {list(allowed)}, got {values[key]!r}", key)

    grid = values["grid"]
    if isinstance(grid, int) and not isinstance(grid, bool):
        grid = [grid, grid]
    if not (isinstance(grid, list) and len(grid) == 2):
        raise ConfigError("expected [height, width]", "grid")
    height, width = (_int("grid", g, 1) for g in grid)

    seed = _int("seed", values["seed"])
    try:
        decoder = DecoderConfig(
            layers=_int("layers", values["layers"], 1),
            heads=_int("heads", values["heads"], 1),
            dim=_int("dim", values["dim"], 1),
            ff_dim=_int("ff_dim", values["ff_dim"], 1),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "dim") from exc
    layout = SequenceLayout(
        prompt_pre=_int("prompt_pre", values["prompt_pre"]),
        height=height,
        width=width,
        prompt_post=_int("prompt_post", values["prompt_post"]),
    )
    schedule = Schedule(
        _number_list("schedule.layers", values["schedule.layers"], int),
        _number_list("schedule.windows", values["schedule.windows"], int),
        _number_list("schedule.ratios", values["schedule.ratios"], float),
    )
    strategy = Strategy(
        guidance=values["strategy.guidance"],
        metric=values["strategy.metric"],
        matching=values["strategy.matching"],
        scope=values["strategy.scope"],
        eviction=values["strategy.eviction"],
    )
    preset = values["preset"]
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}", "preset")

    check = validate_schedule(schedule, decoder.layers, (height, width))
    if not check.ok:
        raise ScheduleError(check.errors)
    return RunConfig(
        seed=seed,
        decoder=decoder,
        layout=layout,
        schedule=schedule,
        strategy=strategy,
        removal_rule=values["schedule.removal_rule"],
        preset=preset,
        input=values["input"],
        out=values["out"],
    )


def parse_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return config_from_mapping(raw)
