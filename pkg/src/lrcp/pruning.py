"""Low-rank compressibility guided pruning.

Pipeline: estimate a dominant subspace of the token matrix, score every token
by the squared norm of its residual outside that subspace, keep the K highest
scoring tokens and fold each discarded token into its most cosine-similar
survivor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BudgetExceedsTokens, DimensionMismatch, InvalidInput, InvalidRank
from .linalg import (
    Subspace,
    _randomized_svd,
    as_token_matrix,
    ROW_BLOCK,
    qr_orthonormalize,
    right_mul,
    row_energy,
    screen_energy,
)

KMEANS_MAX_ITER = 25


class Scoring(str, enum.Enum):
    RESIDUAL_DESCENDING = "residual-desc"
    PROJECTION_NORM_DESCENDING = "projection-desc"
    RESIDUAL_ASCENDING = "residual-asc"


class Centering(str, enum.Enum):
    NONE = "none"
    MEAN = "mean"


class SubspaceMethod(str, enum.Enum):
    PCA = "pca"
    RANDOM_DIRECTIONS = "random"
    COORDINATE_VARIANCE = "coordinate"
    CLUSTER_CENTERS = "cluster"


@dataclass(frozen=True)
class CompressionConfig:
    rank: int = 4
    budget: int = 64
    scoring: Scoring = Scoring.RESIDUAL_DESCENDING
    merge: bool = True
    centering: Centering = Centering.NONE
    subspace_method: SubspaceMethod = SubspaceMethod.PCA
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scoring", Scoring(self.scoring))
        object.__setattr__(self, "centering", Centering(self.centering))
        object.__setattr__(self, "subspace_method", SubspaceMethod(self.subspace_method))
        if self.rank < 1:
            raise InvalidRank(f"rank must be >= 1, got {self.rank}")
        if self.budget < 1:
            raise BudgetExceedsTokens(f"budget must be >= 1, got {self.budget}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("scoring", "centering", "subspace_method"):
            d[key] = d[key].value
        return d


@dataclass
class CompressionResult:
    retained_indices: np.ndarray
    scores: np.ndarray
    output: np.ndarray
    surrogate_loss: float
    assignments: dict[int, int]
    subspace: Subspace | None = field(default=None, repr=False)

    @property
    def budget(self) -> int:
        return len(self.retained_indices)

    def to_dict(self) -> dict:
        return {
            "retained_indices": [int(i) for i in self.retained_indices],
            "scores": [float(s) for s in self.scores],
            "surrogate_loss": float(self.surrogate_loss),
            "assignments": {str(k): int(v) for k, v in sorted(self.assignments.items())},
            "output_shape": list(self.output.shape),
        }


def _check_rank(x: np.ndarray, r: int):
    if not 1 <= r < min(x.shape):
        raise InvalidRank(f"rank r={r} must satisfy 1 <= r < min(N, D) = {min(x.shape)}")


def _order_by_captured_energy(x: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    captured = np.einsum("ij,ij->j", x @ basis, x @ basis)
    order = np.argsort(-captured, kind="stable")
    total = float(np.einsum("ij,ij->", x, x))
    explained = captured[order] / total if total > 0 else np.zeros(basis.shape[1])
    return basis[:, order], explained


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns the k x D center matrix."""
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.maximum(sq - 2 * x @ centers[0] + centers[0] @ centers[0], 0.0)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.maximum(sq - 2 * x @ centers[j] + centers[j] @ centers[j], 0.0))
    labels = None
    for _ in range(max_iter):
        dist = sq[:, None] - 2 * x @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        new_labels = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    return centers


def build_subspace(x, cfg: CompressionConfig) -> Subspace:
    """Estimate the r-dimensional dominant subspace selected by ``cfg.subspace_method``."""
    return _build_subspace(as_token_matrix(x), cfg)[0]


def _build_subspace(x: np.ndarray, cfg: CompressionConfig, checked: bool = True) -> tuple[Subspace, np.ndarray | None]:
    """The subspace, plus the row energies of ``x`` when the PCA sketch produced them."""
    r = cfg.rank
    _check_rank(x, r)
    mean = None
    if cfg.centering is Centering.MEAN:
        mean = x.mean(axis=0)
        x = x - mean
    method = cfg.subspace_method
    if method is SubspaceMethod.PCA:
        sub, energy = _randomized_svd(x, r, seed=cfg.seed, checked=checked)
        return Subspace(sub.basis, sub.explained, mean=mean), energy if mean is None else None
    if method is SubspaceMethod.RANDOM_DIRECTIONS:
        rng = np.random.default_rng(cfg.seed)
        basis = qr_orthonormalize(rng.standard_normal((x.shape[1], r)))
    elif method is SubspaceMethod.COORDINATE_VARIANCE:
        variance = x.var(axis=0)
        axes = np.argsort(-variance, kind="stable")[:r]
        basis = np.zeros((x.shape[1], r))
        basis[axes, np.arange(r)] = 1.0
    elif method is SubspaceMethod.CLUSTER_CENTERS:
        centers = kmeans(x, r, seed=cfg.seed)
        basis = qr_orthonormalize(centers.T)
    else:  # pragma: no cover - enum is closed
        raise InvalidInput(f"unknown subspace method {method!r}")
    basis, explained = _order_by_captured_energy(x, basis)
    return Subspace(basis, explained, mean=mean), None


def _projection_terms(x: np.ndarray, s: Subspace, energy: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token squared norm and squared projection norm (after centering).

    ``energy`` may carry the uncentered row norms when the caller has them.
    """
    if s.basis.shape[0] != x.shape[1]:
        raise DimensionMismatch(f"subspace dimension {s.basis.shape[0]} != token dimension {x.shape[1]}")
    if s.mean is not None:
        x = x - s.mean
        energy = None
    coords = right_mul(x, s.basis.T)
    if energy is None:
        energy = row_energy(x)
    return energy, row_energy(coords)


def projection_norms(x, s: Subspace) -> np.ndarray:
    """Squared norm of each token's projection onto the subspace."""
    return _projection_terms(as_token_matrix(x), s)[1]


def projection_residuals(x, s: Subspace) -> np.ndarray:
    """Squared distance of each token from the subspace, ``|x_i|^2 - |x_i U|^2``.

    Never forms the D x D projector; round-off below zero is clamped.
    """
    total, captured = _projection_terms(as_token_matrix(x), s)
    return np.maximum(total - captured, 0.0)


def select_top_k(scores, k: int, descending: bool = True) -> np.ndarray:
    """Indices of the k best scores, returned in ascending index order.

    Ties go to the lower original index.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise BudgetExceedsTokens(f"budget K={k} must satisfy 1 <= K <= N = {n}")
    key = -scores if descending else scores
    return np.sort(np.argsort(key, kind="stable")[:k])


def _retained_array(retained, n: int) -> np.ndarray:
    idx = np.unique(np.asarray(retained, dtype=np.int64).reshape(-1))
    if idx.size == 0:
        raise InvalidInput("retained set is empty")
    if idx[0] < 0 or idx[-1] >= n:
        raise InvalidInput(f"retained indices must lie in [0, {n})")
    return idx


def _nearest_retained(x: np.ndarray, keep: np.ndarray, sums: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Discarded indices and, for each, the slot in ``keep`` of highest cosine.

    cos(x_i, x_j) = <x_i, x_j> / (|x_i| |x_j|); the positive factor 1/|x_i| is
    constant along a row, so the argmax only needs the retained norms.
    If ``sums`` (K x D) is given, each discarded token is added to its slot's
    row while its block is still in cache.
    """
    n = x.shape[0]
    discard = np.ones(n, dtype=bool)
    discard[keep] = False
    dropped = np.flatnonzero(discard)
    if dropped.size == 0:
        return dropped, dropped
    kept = x[keep]
    norms = np.sqrt(row_energy(kept))
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    unit = kept * inv[:, None]
    slot = np.empty(n, dtype=np.intp)
    for start in range(0, n, ROW_BLOCK):
        chunk = x[start : start + ROW_BLOCK]
        best = np.argmax(unit @ chunk.T, axis=0)
        slot[start : start + ROW_BLOCK] = best
        if sums is None:
            continue
        # row-by-row adds beat np.add.reduceat / np.add.at on wide rows
        rows = np.flatnonzero(discard[start : start + ROW_BLOCK])
        for i, j in zip(rows.tolist(), best[rows].tolist()):
            sums[j] += chunk[i]
    return dropped, slot[dropped]


def assign_tokens(x, retained) -> dict[int, int]:
    """Map each discarded index to the retained index of highest cosine similarity.

    Similarities use the original features. A zero-norm token has cosine 0
    with everything and therefore lands on the lowest retained index.
    """
    x = as_token_matrix(x)
    keep = _retained_array(retained, x.shape[0])
    dropped, slot = _nearest_retained(x, keep)
    return dict(zip(dropped.tolist(), keep[slot].tolist()))


def _merge(x: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    out = x[keep]
    dropped, slot = _nearest_retained(x, keep, sums=out)
    if dropped.size == 0:
        return out, {}
    out /= (1.0 + np.bincount(slot, minlength=keep.size))[:, None]
    return out, dict(zip(dropped.tolist(), keep[slot].tolist()))


def merge_tokens(x, retained) -> tuple[np.ndarray, dict[int, int]]:
    """Fold every discarded token into its most cosine-similar retained token.

    Each retained row becomes the plain mean of itself and the tokens assigned
    to it; output rows follow ascending retained index.
    """
    x = as_token_matrix(x)
    return _merge(x, _retained_array(retained, x.shape[0]))


def surrogate_loss(x, s: Subspace, retained, scores=None) -> float:
    """Sum of squared projection residuals over the discarded tokens.

    Summed with ``math.fsum`` so equal multisets of discarded scores give
    bit-identical losses regardless of order.
    """
    x = as_token_matrix(x)
    if scores is None:
        scores = projection_residuals(x, s)
    keep = _retained_array(retained, x.shape[0])
    mask = np.ones(x.shape[0], dtype=bool)
    mask[keep] = False
    return math.fsum(np.asarray(scores)[mask].tolist())


def surrogate_loss_dense(x, s: Subspace, retained) -> float:
    """Cross-check form ``|(I - M_S) X (I - P_r)|_F^2`` with explicit matrices.

    Builds N x N and D x D operators, so keep it to small inputs.
    """
    x = as_token_matrix(x)
    if s.mean is not None:
        x = x - s.mean
    n, d = x.shape
    keep = _retained_array(retained, n)
    m_s = np.zeros((n, n))
    m_s[keep, keep] = 1.0
    p_r = s.basis @ s.basis.T
    resid = (np.eye(n) - m_s) @ x @ (np.eye(d) - p_r)
    return float(np.sum(resid * resid))


def compress(x, cfg: CompressionConfig) -> CompressionResult:
    """Run the full pruning pipeline on one token matrix."""
    x = as_token_matrix(x, check_finite=False)
    n = x.shape[0]
    if not 1 <= cfg.budget <= n:
        raise BudgetExceedsTokens(f"budget K={cfg.budget} must satisfy 1 <= K <= N = {n}")
    # uncentered PCA screens for NaN/inf in its first sketch pass and hands
    # back the row energies; other paths check up front
    fused = cfg.subspace_method is SubspaceMethod.PCA and cfg.centering is Centering.NONE
    energy = None
    if not fused:
        energy = row_energy(x)
        screen_energy(x, energy)
    sub, sketch_energy = _build_subspace(x, cfg, checked=not fused)
    total, captured = _projection_terms(x, sub, energy if energy is not None else sketch_energy)
    residuals = np.maximum(total - captured, 0.0)
    if cfg.scoring is Scoring.PROJECTION_NORM_DESCENDING:
        keep = select_top_k(captured, cfg.budget, descending=True)
    else:
        keep = select_top_k(residuals, cfg.budget, descending=cfg.scoring is Scoring.RESIDUAL_DESCENDING)
    if cfg.merge:
        output, assignments = _merge(x, keep)
    else:
        output = x[keep]
        dropped, slot = _nearest_retained(x, keep)
        assignments = dict(zip(dropped.tolist(), keep[slot].tolist()))
    mask = np.ones(n, dtype=bool)
    mask[keep] = False
    return CompressionResult(
        retained_indices=keep,
        scores=residuals,
        output=output,
        surrogate_loss=math.fsum(residuals[mask].tolist()),
        assignments=assignments,
        subspace=sub,
    )
