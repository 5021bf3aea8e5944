"""Multi-stage pruning plans and their retention bookkeeping.

A plan compresses once at the vision-encoder output (layer 0) and again at
one or more later LLM layers. Keep counts are floored against the cumulative
ratio product, so a plan written with rounded percentages (0.167, 0.333)
lands on the same integers as the exact fractions (1/6, 1/3).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InvalidInput, InvalidRatio, StageShapeMismatch
from .linalg import as_token_matrix
from .pruning import CompressionConfig, CompressionResult, compress

# floor() snaps values within this distance below an integer up to it
_FLOOR_SLACK = Fraction(1, 10**9)


@dataclass(frozen=True)
class Stage:
    label: str
    retain_ratio: float
    absolute_keep: int
    start_layer: int


@dataclass(frozen=True)
class StagedPlan:
    total_tokens: int
    stages: tuple[Stage, ...]
    llm_layers: int
    final_keep: int
    final_retain: float
    average_retention: float
    nominal_average_retention: float

    @property
    def keeps(self) -> tuple[int, ...]:
        return tuple(s.absolute_keep for s in self.stages)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _as_fraction(ratio) -> Fraction:
    if isinstance(ratio, str):
        try:
            return Fraction(ratio.strip())
        except ValueError as exc:
            raise InvalidRatio(f"cannot parse ratio {ratio!r}") from exc
    if isinstance(ratio, Fraction):
        return ratio
    if isinstance(ratio, (int, float, np.floating, np.integer)) and math.isfinite(float(ratio)):
        return Fraction(float(ratio))
    raise InvalidRatio(f"ratio must be a finite number, got {ratio!r}")


def make_staged_plan(
    n_tokens: int,
    stage_ratios: Sequence,
    llm_layers: int = 32,
    compress_layer: int | Sequence[int] = 16,
    labels: Sequence[str] | None = None,
) -> StagedPlan:
    """Turn per-stage retention ratios into absolute keep counts.

    Stage 1 acts at the encoder output and governs layers ``[0, l_1)``; stage t
    governs ``[l_{t-1}, l_t)`` and the last stage runs to ``llm_layers``.
    ``compress_layer`` gives the layer index of every stage after the first.
    """
    if n_tokens < 1:
        raise InvalidInput(f"n_tokens must be positive, got {n_tokens}")
    ratios = [_as_fraction(r) for r in stage_ratios]
    if not ratios:
        raise InvalidRatio("at least one stage ratio is required")
    for r in ratios:
        if not 0 < r <= 1:
            raise InvalidRatio(f"stage ratios must lie in (0, 1], got {float(r)}")
    layers = [compress_layer] if isinstance(compress_layer, (int, np.integer)) else list(compress_layer)
    layers = layers[: len(ratios) - 1]
    if len(layers) != len(ratios) - 1:
        raise InvalidInput(f"need {len(ratios) - 1} compression layers, got {len(layers)}")
    bounds = [0, *[int(l) for l in layers], llm_layers]
    if any(b >= c for b, c in zip(bounds, bounds[1:])):
        raise InvalidInput(f"compression layers must increase strictly within (0, {llm_layers}): {layers}")
    if labels is None:
        labels = ["encoder"] + [f"layer{l}" for l in layers]

    stages = []
    cumulative = Fraction(1)
    keep_weighted = Fraction(0)
    nominal_weighted = Fraction(0)
    for t, ratio in enumerate(ratios):
        cumulative *= ratio
        keep = math.floor(n_tokens * cumulative + _FLOOR_SLACK)
        if keep < 1:
            raise InvalidRatio(f"stage {t + 1} keeps 0 of {n_tokens} tokens")
        span = bounds[t + 1] - bounds[t]
        keep_weighted += keep * span
        nominal_weighted += cumulative * span
        stages.append(Stage(labels[t], float(ratio), keep, bounds[t]))

    return StagedPlan(
        total_tokens=n_tokens,
        stages=tuple(stages),
        llm_layers=llm_layers,
        final_keep=stages[-1].absolute_keep,
        final_retain=float(cumulative),
        average_retention=float(keep_weighted / (llm_layers * n_tokens)),
        nominal_average_retention=float(nominal_weighted / llm_layers),
    )


# Two-stage settings: (tokens, stage ratios, LLM layers, compression layer)
PLAN_PRESETS: dict[str, tuple[int, tuple[str, ...], int, int]] = {
    "llava-v1.5/avg192": (576, ("1/2", "1/3"), 32, 16),
    "llava-v1.5/avg128": (576, ("1/3", "1/3"), 32, 16),
    "llava-v1.5/avg64": (576, ("1/6", "1/3"), 32, 16),
    "llava-next/avg640": (2880, ("1/3", "1/3"), 32, 16),
    "llava-next/avg320": (2880, ("1/6", "1/3"), 32, 16),
    "llava-next/avg160": (2880, ("1/12", "1/3"), 32, 16),
    "qwen2.5-vl/avg20": (1024, ("4/15", "1/2"), 28, 14),
    "qwen2.5-vl/avg10": (1024, ("2/15", "1/2"), 28, 14),
}


def preset_plan(name: str, n_tokens: int | None = None) -> StagedPlan:
    try:
        tokens, ratios, layers, at = PLAN_PRESETS[name]
    except KeyError:
        raise InvalidInput(f"unknown plan preset {name!r}; choose from {sorted(PLAN_PRESETS)}") from None
    return make_staged_plan(n_tokens or tokens, ratios, layers, at)


def compress_staged(
    stage_inputs: Sequence,
    plan: StagedPlan,
    cfg: CompressionConfig,
    mode: str = "simulate",
) -> list[CompressionResult]:
    """Apply ``compress`` once per stage with the plan's keep counts.

    In "simulate" mode only the first input is used and each later stage
    consumes the previous stage's output. In "replay" mode every stage has its
    own externally exported matrix whose row count must equal the previous
    stage's keep.
    """
    if mode not in ("simulate", "replay"):
        raise InvalidInput(f"mode must be 'simulate' or 'replay', got {mode!r}")
    if not stage_inputs:
        raise StageShapeMismatch("no stage inputs supplied")
    if mode == "replay" and len(stage_inputs) != len(plan.stages):
        raise StageShapeMismatch(f"replay needs {len(plan.stages)} inputs, got {len(stage_inputs)}")

    results: list[CompressionResult] = []
    current = as_token_matrix(stage_inputs[0])
    expected_rows = plan.total_tokens
    for t, stage in enumerate(plan.stages):
        if mode == "replay" and t > 0:
            current = as_token_matrix(stage_inputs[t])
        if current.shape[0] != expected_rows:
            raise StageShapeMismatch(
                f"stage {t + 1} ({stage.label}) expects {expected_rows} tokens, got {current.shape[0]}"
            )
        result = compress(current, dataclasses.replace(cfg, budget=stage.absolute_keep))
        results.append(result)
        current = result.output
        expected_rows = stage.absolute_keep
    return results
