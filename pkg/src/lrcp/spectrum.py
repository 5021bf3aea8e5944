"""Effective-rank spectra and subspace-stability experiments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    InsufficientSpectrum,
    InvalidComponentCount,
    InvalidInput,
    KeepBelowRank,
    TooFewSurvivors,
)
from .linalg import (
    EXACT_SVD_LIMIT,
    Subspace,
    as_token_matrix,
    exact_svd,
    principal_angle_similarity,
    randomized_truncated_svd,
)
from .pruning import CompressionConfig, Scoring, build_subspace, projection_norms, projection_residuals, select_top_k

DEFAULT_LEVELS = (90, 95)
DEFAULT_TRIALS = 20
# cumulative sums this close below a threshold count as reaching it
_CUMSUM_SLACK = 1e-12


@dataclass
class SpectrumReport:
    explained: list[float]
    rank_at: dict[int, int]
    total_energy: float

    def to_dict(self) -> dict:
        return {
            "explained": list(self.explained),
            "rank_at": {str(k): v for k, v in sorted(self.rank_at.items())},
            "total_energy": self.total_energy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrumReport":
        return cls(
            explained=[float(v) for v in d["explained"]],
            rank_at={int(float(k)): int(v) for k, v in d["rank_at"].items()},
            total_energy=float(d["total_energy"]),
        )


@dataclass
class StabilityReport:
    mode: str
    drop_ratio: float
    trials: int
    similarities: list[float]
    mean_similarity: float
    min_similarity: float
    keeps: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityReport":
        return cls(**d)


def _level_key(v) -> int | float:
    v = float(v)
    return int(v) if v.is_integer() else v


def rank_at_variance(spectrum, v: float) -> int:
    """Smallest d whose first d explained fractions sum to at least v percent."""
    if not 0 < v <= 100:
        raise InvalidInput(f"variance level must lie in (0, 100], got {v}")
    explained = spectrum.explained if isinstance(spectrum, SpectrumReport) else spectrum
    cumulative = np.cumsum(np.asarray(explained, dtype=np.float64))
    hit = np.flatnonzero(cumulative >= v / 100.0 - _CUMSUM_SLACK)
    if hit.size == 0:
        reached = float(cumulative[-1]) if cumulative.size else 0.0
        raise InsufficientSpectrum(
            f"{len(cumulative)} components explain {reached:.6f} < {v / 100:.6f}; compute more components"
        )
    return int(hit[0]) + 1


def explained_variance_spectrum(
    x,
    max_components: int | None = None,
    levels: Sequence[float] = DEFAULT_LEVELS,
    seed: int = 0,
) -> SpectrumReport:
    """Variance fraction sigma_j^2 / |X|_F^2 of each principal direction.

    Exact (Jacobi) when min(N, D) <= 512, randomized otherwise; the randomized
    path only sees ``max_components`` directions, so high levels may be out of
    reach there.
    """
    x = as_token_matrix(x)
    k = min(x.shape)
    if max_components is None:
        max_components = k if k <= EXACT_SVD_LIMIT else min(k - 1, 64)
    if not 1 <= max_components <= k:
        raise InvalidComponentCount(f"max_components must lie in [1, {k}], got {max_components}")
    total = float(np.einsum("ij,ij->", x, x))
    if k <= EXACT_SVD_LIMIT:
        s = exact_svd(x).s[:max_components]
        explained = s**2 / total if total > 0 else np.zeros_like(s)
    else:
        if max_components >= k:
            raise InvalidComponentCount(f"randomized path needs max_components < {k}")
        explained = randomized_truncated_svd(x, max_components, seed=seed).explained
    explained = np.minimum.accumulate(np.clip(explained, 0.0, 1.0))
    report = SpectrumReport(explained=explained.tolist(), rank_at={}, total_energy=total)
    for v in levels:
        report.rank_at[_level_key(v)] = rank_at_variance(report, v)
    return report


def numerical_rank(spectrum, floor: float = 1e-12) -> int:
    explained = spectrum.explained if isinstance(spectrum, SpectrumReport) else spectrum
    return int(np.count_nonzero(np.asarray(explained) > floor))


def _pca(x: np.ndarray, r: int, seed: int) -> Subspace:
    return randomized_truncated_svd(x, r, seed=seed)


def _report(mode: str, drop: float, sims: list[float], keeps: list[int]) -> StabilityReport:
    arr = np.clip(np.asarray(sims, dtype=np.float64), 0.0, 1.0)
    return StabilityReport(
        mode=mode,
        drop_ratio=float(drop),
        trials=len(sims),
        similarities=arr.tolist(),
        mean_similarity=float(arr.mean()),
        min_similarity=float(arr.min()),
        keeps=keeps,
    )


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream for one trial, derived from the experiment seed."""
    return np.random.default_rng([seed, trial])


def subset_similarity(x, rows, reference: Subspace, seed: int = 0, aggregate: str = "mean") -> float:
    """Similarity between ``reference`` and the top-r subspace of ``x[rows]``."""
    sub = _pca(np.asarray(x)[np.sort(np.asarray(rows))], reference.rank, seed)
    return principal_angle_similarity(reference, sub, aggregate=aggregate)


def stability_random_dropout(
    x,
    r: int,
    drop_ratio: float,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    aggregate: str = "mean",
) -> StabilityReport:
    """Re-estimate the top-r subspace after uniformly dropping tokens.

    Each trial keeps ``floor((1 - drop_ratio) N)`` rows sampled without
    replacement from its own RNG stream, so trials are schedule-independent.
    """
    x = as_token_matrix(x)
    n = x.shape[0]
    if not 0 <= drop_ratio < 1:
        raise InvalidInput(f"drop_ratio must lie in [0, 1), got {drop_ratio}")
    if trials < 1:
        raise InvalidInput(f"trials must be positive, got {trials}")
    survivors = int(np.floor((1.0 - drop_ratio) * n + 1e-9))
    if survivors <= r:
        raise TooFewSurvivors(f"dropping {drop_ratio:.0%} of {n} tokens leaves {survivors} <= r={r}")
    reference = _pca(x, r, seed)
    sims = []
    for t in range(trials):
        rows = trial_rng(seed, t).choice(n, size=survivors, replace=False)
        sims.append(subset_similarity(x, rows, reference, seed=seed, aggregate=aggregate))
    return _report("random", drop_ratio, sims, [survivors] * trials)


def stability_under_pruning(x, cfg: CompressionConfig, stage_keeps: Sequence[int]) -> StabilityReport:
    """Subspace similarity after each stage of importance-based (LRCP) selection.

    Stages are nested: stage t scores and selects among the tokens kept by
    stage t-1, without merging, so only the selection effect is measured.
    """
    x = as_token_matrix(x)
    keeps = [int(k) for k in stage_keeps]
    if not keeps:
        raise InvalidInput("stage_keeps is empty")
    if any(b >= a for a, b in zip(keeps, keeps[1:])):
        raise InvalidInput(f"stage_keeps must be strictly decreasing: {keeps}")
    if keeps[-1] <= cfg.rank:
        raise KeepBelowRank(f"every keep must exceed r={cfg.rank}: {keeps}")
    if keeps[0] > x.shape[0]:
        raise InvalidInput(f"keep {keeps[0]} exceeds N = {x.shape[0]}")
    reference = build_subspace(x, cfg)
    rows = np.arange(x.shape[0])
    sims = []
    for keep in keeps:
        current = x[rows]
        sub = build_subspace(current, cfg)
        if cfg.scoring is Scoring.PROJECTION_NORM_DESCENDING:
            picked = select_top_k(projection_norms(current, sub), keep)
        else:
            picked = select_top_k(
                projection_residuals(current, sub), keep, descending=cfg.scoring is Scoring.RESIDUAL_DESCENDING
            )
        rows = rows[picked]
        sims.append(principal_angle_similarity(reference, build_subspace(x[rows], cfg)))
    drop = 1.0 - keeps[-1] / x.shape[0]
    return _report("pruned", drop, sims, keeps)
