"""Dense matrix primitives: orthonormalization, SVDs and subspace angles.

Two SVD routes live here on purpose. :func:`exact_svd` is a one-sided Jacobi
(Hestenes) solver used as an oracle at desk scale; :func:`randomized_truncated_svd`
is the range-finder path used by the pruning pipeline. They share no
factorization code, so agreement between them is a meaningful check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    DidNotConverge,
    DimensionMismatch,
    EmptyInput,
    InvalidInput,
    InvalidRank,
    NonFiniteValue,
    RankDeficient,
    RankMismatch,
    SizeLimitExceeded,
)

EXACT_SVD_LIMIT = 512
OVERSAMPLE = 8
POWER_ITERS = 2
# rows per cache block when fusing passes over a token matrix (2 MiB at D=1024)
ROW_BLOCK = 256


def as_token_matrix(x, name: str = "x", check_finite: bool = True) -> np.ndarray:
    """Validate ``x`` as an N x D float64 token matrix (row = token)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D (tokens x features), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise EmptyInput(f"{name} has no tokens or no features: shape {arr.shape}")
    if check_finite:
        ensure_finite(arr, arr.sum(), name)
    return arr


def ensure_finite(arr: np.ndarray, reduction, name: str = "x"):
    """Raise NonFiniteValue if ``arr`` has a NaN or inf.

    ``reduction`` is any sum over ``arr`` the caller already has; one finite
    reduction rules out bad entries, so the elementwise mask only runs to
    locate the culprit (or when a finite sum overflowed).
    """
    if not np.isfinite(reduction).all() and not np.isfinite(arr).all():
        row, col = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteValue(f"{name} has a non-finite entry at row {row}, column {col}")


def screen_energy(x: np.ndarray, energy: np.ndarray, name: str = "x"):
    """Reject NaN/inf entries, then row energies that overflowed float64."""
    ensure_finite(x, energy, name)
    if not np.isfinite(energy).all():
        row = int(np.flatnonzero(~np.isfinite(energy))[0])
        raise InvalidInput(f"{name} row {row} has a squared norm beyond float64 range; rescale the input")


def row_energy(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean norm of every row."""
    return np.einsum("ij,ij->i", x, x)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Subspace:
    """Orthonormal D x r basis plus the variance fraction each column explains.

    ``mean`` is set when the basis was estimated from mean-centered tokens;
    residuals against this subspace are then measured from that mean.
    """

    basis: np.ndarray
    explained: np.ndarray
    mean: np.ndarray | None = field(default=None)

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[1] < 1:
            raise InvalidInput(f"basis must be D x r with r >= 1, got {basis.shape}")
        explained = np.asarray(self.explained, dtype=np.float64).reshape(-1)
        if explained.shape[0] != basis.shape[1]:
            raise InvalidInput("explained must have one entry per basis column")
        object.__setattr__(self, "basis", _readonly(basis))
        object.__setattr__(self, "explained", _readonly(explained))
        if self.mean is not None:
            mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
            if mean.shape[0] != basis.shape[0]:
                raise DimensionMismatch("mean must have length D")
            object.__setattr__(self, "mean", _readonly(mean))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


def fix_signs(v: np.ndarray, *others: np.ndarray):
    """Flip columns of ``v`` so each column's largest-magnitude entry is positive.

    The same flips are applied to the matching columns of ``others``.
    """
    if v.shape[1] == 0:
        return (v, *others) if others else v
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    flipped = v * signs
    if not others:
        return flipped
    return (flipped, *(o * signs for o in others))


def qr_orthonormalize(m, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis for the column span of ``m``.

    Raises RankDeficient when any pivot of R falls below ``tol`` relative to
    the largest column norm, i.e. the columns are not independent.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise InvalidInput(f"expected a 2-D matrix with at least one column, got {m.shape}")
    if m.shape[1] > m.shape[0]:
        raise RankDeficient(f"{m.shape[1]} columns cannot be independent in dimension {m.shape[0]}")
    scale = np.linalg.norm(m, axis=0).max()
    if scale == 0.0:
        raise RankDeficient("all columns are zero")
    q, r = np.linalg.qr(m)
    pivots = np.abs(np.diag(r))
    bad = np.flatnonzero(pivots <= tol * scale)
    if bad.size:
        raise RankDeficient(
            f"numerical rank {m.shape[1] - bad.size} < {m.shape[1]} columns (first dependent column {bad[0]})"
        )
    return fix_signs(q)


class SVDResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def _round_robin(n: int):
    """Pairings for one Jacobi sweep: n-1 rounds of n/2 disjoint pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _complete_columns(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    if keep.all():
        return u
    u = u.copy()
    good = u[:, keep]
    m = u.shape[0]
    # deterministic candidates: coordinate axes, taken in order
    fill = []
    basis = good
    for axis in range(m):
        if len(fill) == int((~keep).sum()):
            break
        e = np.zeros(m)
        e[axis] = 1.0
        for _ in range(2):
            if basis.shape[1]:
                e = e - basis @ (basis.T @ e)
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            e = e / norm
            fill.append(e)
            basis = np.column_stack([basis, e])
    u[:, ~keep] = np.column_stack(fill)
    return u


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided Jacobi on the columns of ``a``. Returns (A W, W), W orthogonal."""
    m, n = a.shape
    pad = n % 2
    # rows of `cols` are the columns of `a`; row slicing keeps memory contiguous
    cols = np.zeros((n + pad, m))
    cols[:n] = a.T
    w = np.eye(n + pad)
    rounds = _round_robin(n + pad)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = cols[p], cols[q]
            alpha = np.einsum("ij,ij->i", ap, ap)
            beta = np.einsum("ij,ij->i", aq, aq)
            gamma = np.einsum("ij,ij->i", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)[:, None]
            s = np.where(active, c[:, 0] * t, 0.0)[:, None]
            cols[p], cols[q] = c * ap - s * aq, s * ap + c * aq
            wp, wq = w[p], w[q]
            w[p], w[q] = c * wp - s * wq, s * wp + c * wq
        if not rotated:
            return cols[:n].T, w[:n, :n].T
    raise DidNotConverge(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def exact_svd(m, limit: int = EXACT_SVD_LIMIT, max_sweeps: int = 60) -> SVDResult:
    """Thin SVD ``m = u @ diag(s) @ v.T`` via one-sided Jacobi rotations.

    Only offered while ``min(N, D) <= limit``. The matrix is first reduced to
    its triangular QR factor and the rotations run on R^T, which converges in
    a handful of sweeps. Singular values come back non-increasing; ``u`` and
    ``v`` have orthonormal columns, null directions completed deterministically.
    """
    x = as_token_matrix(m, "m")
    n_rows, n_cols = x.shape
    k = min(n_rows, n_cols)
    if k > limit:
        raise SizeLimitExceeded(f"min(N, D) = {k} exceeds the exact-SVD limit {limit}")
    transpose = n_rows < n_cols
    a = x.T if transpose else x
    # a = Q R, R^T W = Z  =>  a = (Q W) diag(s) (Z / s)^T
    q, r = np.linalg.qr(a)
    z, w = _jacobi(r.T, tol=1e-15 * k, max_sweeps=max_sweeps)
    s = np.linalg.norm(z, axis=0)
    order = np.argsort(-s, kind="stable")
    s, z, w = s[order], z[:, order], w[:, order]
    nonzero = s > max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    right = np.zeros_like(z)
    right[:, nonzero] = z[:, nonzero] / s[nonzero]
    right = _complete_columns(right, nonzero)
    left = q @ w
    s = np.where(nonzero, s, 0.0)
    u, v = (right, left) if transpose else (left, right)
    v, u = fix_signs(v, u)
    return SVDResult(u=u, s=s, v=v)


def right_mul(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``x @ rows.T`` for a short, wide ``rows``.

    Written as ``(rows @ x.T).T`` because that orientation streams a
    row-major ``x`` faster through BLAS for skinny products.
    """
    return (np.ascontiguousarray(rows) @ x.T).T


def randomized_truncated_svd(
    m,
    r: int,
    seed: int | None = 0,
    oversample: int = OVERSAMPLE,
    power_iters: int = POWER_ITERS,
) -> Subspace:
    """Top-r right-singular subspace by a randomized range finder.

    Cost is O(N D (r + oversample)) per pass. Explained fractions are
    sigma_j^2 over the full Frobenius energy of ``m``.
    """
    return _randomized_svd(as_token_matrix(m, "m"), r, seed, oversample, power_iters)[0]


def sketch_rows(x: np.ndarray, rows: np.ndarray, block: int = ROW_BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """``right_mul(x, rows)`` and the row energies of ``x`` in one sweep.

    Working through cache-sized row blocks reads ``x`` from memory once
    instead of twice.
    """
    rows = np.ascontiguousarray(rows)
    n = x.shape[0]
    product = np.empty((n, rows.shape[0]))
    energy = np.empty(n)
    for start in range(0, n, block):
        chunk = x[start : start + block]
        product[start : start + block] = (rows @ chunk.T).T
        energy[start : start + block] = row_energy(chunk)
    return product, energy


def _randomized_svd(
    x: np.ndarray,
    r: int,
    seed,
    oversample: int = OVERSAMPLE,
    power_iters: int = POWER_ITERS,
    total: float | None = None,
    checked: bool = True,
):
    """Range finder core; returns the subspace and the row energies of ``x``.

    With ``checked=False`` the input has not been screened for NaN/inf yet and
    the first pass does it.
    """
    n_rows, n_cols = x.shape
    if not 1 <= r < min(n_rows, n_cols):
        raise InvalidRank(f"rank r={r} must satisfy 1 <= r < min(N, D) = {min(n_rows, n_cols)}")
    width = min(r + oversample, min(n_rows, n_cols))
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((width, n_cols))
    sketch, energy = sketch_rows(x, omega)
    if not checked:
        screen_energy(x, energy)
    if total is None:
        total = math.fsum(energy.tolist())
    q, _ = np.linalg.qr(sketch)
    for _ in range(power_iters):
        z, _ = np.linalg.qr((q.T @ x).T)
        q, _ = np.linalg.qr(right_mul(x, z.T))
    b = q.T @ x
    _, sigma, vt = np.linalg.svd(b, full_matrices=False)
    basis = fix_signs(vt[:r].T)
    explained = sigma[:r] ** 2 / total if total > 0 else np.zeros(r)
    return Subspace(basis=basis, explained=explained), energy


def _basis_of(s) -> np.ndarray:
    return s.basis if isinstance(s, Subspace) else np.asarray(s, dtype=np.float64)


def principal_cosines(a, b) -> np.ndarray:
    """Cosines of the principal angles between two equal-rank subspaces, descending."""
    ba, bb = _basis_of(a), _basis_of(b)
    if ba.shape[0] != bb.shape[0]:
        raise DimensionMismatch(f"ambient dimensions differ: {ba.shape[0]} vs {bb.shape[0]}")
    if ba.shape[1] != bb.shape[1]:
        raise RankMismatch(f"subspace ranks differ: {ba.shape[1]} vs {bb.shape[1]}")
    cos = np.linalg.svd(ba.T @ bb, compute_uv=False)
    return np.clip(cos, 0.0, 1.0)


def principal_angle_similarity(a, b, aggregate: str = "mean") -> float:
    """Similarity in [0, 1] between subspaces from their principal-angle cosines.

    ``aggregate`` is "mean" (default), "min" or "product".
    """
    cos = principal_cosines(a, b)
    if aggregate == "mean":
        return float(cos.mean())
    if aggregate == "min":
        return float(cos.min())
    if aggregate == "product":
        return float(np.prod(cos))
    raise InvalidInput(f"unknown aggregate {aggregate!r}")
