"""Seeded synthetic token matrices and an exhaustive subset oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionTooSmall, InvalidInput, InvalidSpectrum, TooManySubsets
from .linalg import Subspace, as_token_matrix
from .pruning import projection_residuals

MAX_SUBSETS = 10**6


@dataclass
class PlantedInstance:
    matrix: np.ndarray
    true_subspace: Subspace
    outlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    noise_sigma: float = 0.0

    def to_dict(self) -> dict:
        return {
            "shape": list(self.matrix.shape),
            "rank": self.true_subspace.rank,
            "outlier_indices": [int(i) for i in self.outlier_indices],
            "noise_sigma": float(self.noise_sigma),
            "true_basis": self.true_subspace.basis.tolist(),
        }


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _noise(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal(shape)
    if kind == "student-t":
        # df=3, rescaled to unit variance
        return rng.standard_t(3, size=shape) / math.sqrt(3.0)
    raise InvalidInput(f"unknown noise kind {kind!r}")


def gen_low_rank_noise(
    n: int,
    d: int,
    r: int,
    spectrum,
    sigma: float = 0.0,
    seed: int = 0,
    noise: str = "gaussian",
) -> PlantedInstance:
    """``A diag(spectrum) B^T + sigma G`` with seeded orthonormal A (n x r), B (d x r)."""
    spectrum = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    if not 1 <= r <= min(n, d):
        raise InvalidSpectrum(f"rank {r} must lie in [1, min(n, d) = {min(n, d)}]")
    if spectrum.shape[0] != r or (spectrum <= 0).any() or (np.diff(spectrum) > 0).any():
        raise InvalidSpectrum("spectrum needs r positive, non-increasing values")
    if sigma < 0:
        raise InvalidInput(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    a = _orthonormal(rng, n, r)
    b = _orthonormal(rng, d, r)
    x = (a * spectrum) @ b.T
    if sigma > 0:
        x = x + sigma * _noise(rng, (n, d), noise)
    total = float(np.sum(x * x))
    true = Subspace(basis=b, explained=spectrum**2 / total)
    return PlantedInstance(matrix=x, true_subspace=true, noise_sigma=float(sigma))


def relative_sigma(n: int, d: int, spectrum, fraction: float) -> float:
    """Per-entry noise level whose expected Frobenius norm is ``fraction`` of the signal's."""
    signal = float(np.linalg.norm(np.asarray(spectrum, dtype=np.float64)))
    return fraction * signal / math.sqrt(n * d)


def gen_background_outliers(
    n_background: int,
    n_outliers: int,
    d: int,
    r: int,
    seed: int = 0,
    sigma: float = 0.0,
) -> PlantedInstance:
    """Background rows in an r-dim subspace plus unit-norm outliers orthogonal to it.

    Background coefficients are standard normal. Each outlier is its own
    orthonormal direction outside the background span, and outlier positions
    are shuffled among the rows.
    """
    if r < 1 or n_background < 0 or n_outliers < 0 or n_background + n_outliers < 1:
        raise InvalidInput("need r >= 1 and at least one row")
    if r + n_outliers > d:
        raise DimensionTooSmall(f"r + n_outliers = {r + n_outliers} exceeds d = {d}")
    rng = np.random.default_rng(seed)
    q = _orthonormal(rng, d, r + n_outliers)
    u, out_dirs = q[:, :r], q[:, r:]
    background = rng.standard_normal((n_background, r)) @ u.T
    if sigma > 0:
        background = background + sigma * rng.standard_normal(background.shape)
    n = n_background + n_outliers
    positions = rng.permutation(n)
    outlier_idx = np.sort(positions[:n_outliers])
    background_idx = np.setdiff1d(np.arange(n), outlier_idx)
    x = np.empty((n, d))
    x[background_idx] = background
    x[outlier_idx] = out_dirs.T
    total = float(np.sum(x * x))
    captured = np.sum((x @ u) ** 2, axis=0)
    order = np.argsort(-captured, kind="stable")
    true = Subspace(basis=u[:, order], explained=captured[order] / total)
    return PlantedInstance(matrix=x, true_subspace=true, outlier_indices=outlier_idx, noise_sigma=float(sigma))


def brute_force_best_subset(x, s: Subspace, k: int, limit: int = MAX_SUBSETS) -> tuple[tuple[int, ...], float]:
    """Exhaustively minimize the surrogate loss over all size-k subsets.

    Losses are correctly rounded sums (``math.fsum``) of the discarded
    residuals; the lexicographically smallest minimizer wins.
    """
    x = as_token_matrix(x)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidInput(f"k must lie in [1, {n}], got {k}")
    count = math.comb(n, k)
    if count > limit:
        raise TooManySubsets(f"C({n}, {k}) = {count} exceeds the enumeration limit {limit}")
    scores = projection_residuals(x, s).tolist()
    best, best_loss = None, math.inf
    everything = set(range(n))
    for subset in itertools.combinations(range(n), k):
        loss = math.fsum(scores[i] for i in sorted(everything.difference(subset)))
        if loss < best_loss:
            best, best_loss = subset, loss
    return best, best_loss
