import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrcp.errors import (
    DimensionMismatch,
    InvalidRank,
    NonFiniteValue,
    RankDeficient,
    RankMismatch,
    SizeLimitExceeded,
)
from lrcp.linalg import (
    Subspace,
    as_token_matrix,
    exact_svd,
    principal_angle_similarity,
    principal_cosines,
    qr_orthonormalize,
    randomized_truncated_svd,
)
from lrcp.synth import gen_low_rank_noise

from conftest import planted


def orthonormal_error(b):
    return np.abs(b.T @ b - np.eye(b.shape[1])).max()


def span_of(*cols):
    return np.column_stack(cols).astype(float)


class TestQR:
    def test_identity_columns_unchanged(self):
        m = np.eye(4)[:, :2]
        np.testing.assert_array_equal(qr_orthonormalize(m), m)

    def test_axis_aligned_scaling(self):
        q = qr_orthonormalize([[2.0, 0.0], [0.0, 0.0], [0.0, 3.0]])
        np.testing.assert_allclose(np.abs(q), [[1, 0], [0, 0], [0, 1]], atol=1e-15)

    def test_random_gram_identity(self, rng):
        m = rng.standard_normal((6, 3))
        q = qr_orthonormalize(m)
        assert orthonormal_error(q) < 1e-10
        # same span: projecting m onto span(q) loses nothing
        np.testing.assert_allclose(q @ (q.T @ m), m, atol=1e-12)

    def test_dependent_columns_rejected(self, rng):
        a = rng.standard_normal((5, 2))
        with pytest.raises(RankDeficient):
            qr_orthonormalize(np.column_stack([a, a[:, 0] + 2 * a[:, 1]]))

    def test_zero_and_wide_rejected(self):
        with pytest.raises(RankDeficient):
            qr_orthonormalize(np.zeros((3, 2)))
        with pytest.raises(RankDeficient):
            qr_orthonormalize(np.ones((2, 3)))


class TestExactSVD:
    def test_diagonal(self):
        res = exact_svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(res.s, [3, 2, 1])
        np.testing.assert_allclose(np.abs(res.v), np.eye(3), atol=1e-15)

    def test_outer_product(self):
        a, b = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
        res = exact_svd(np.outer(a, b))
        assert res.s[0] == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b), rel=1e-14)
        assert np.all(res.s[1:] == 0)

    @pytest.mark.parametrize("shape", [(8, 5), (5, 8), (1, 6), (6, 1), (40, 40)])
    def test_reconstruction(self, rng, shape):
        x = rng.standard_normal(shape)
        u, s, v = exact_svd(x)
        assert np.linalg.norm(x - (u * s) @ v.T) / np.linalg.norm(x) < 1e-10
        assert orthonormal_error(u) < 1e-8 and orthonormal_error(v) < 1e-8
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0)

    def test_rank_deficient_bases_stay_orthonormal(self, rng):
        x = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 9))
        u, s, v = exact_svd(x)
        assert np.count_nonzero(s) == 2
        assert orthonormal_error(u) < 1e-8 and orthonormal_error(v) < 1e-8
        assert np.linalg.norm(x - (u * s) @ v.T) < 1e-12

    def test_graded_singular_values(self, rng):
        # relative accuracy on a badly scaled matrix
        x = rng.standard_normal((3, 10)) * np.array([[1e6], [1.0], [1e-6]])
        s = exact_svd(x).s
        np.testing.assert_allclose(s, np.linalg.svd(x, compute_uv=False), rtol=1e-9)

    def test_size_limit(self):
        with pytest.raises(SizeLimitExceeded):
            exact_svd(np.ones((20, 20)), limit=10)

    def test_sign_convention(self, rng):
        v = exact_svd(rng.standard_normal((12, 5))).v
        pivots = v[np.argmax(np.abs(v), axis=0), np.arange(5)]
        assert np.all(pivots > 0)

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteValue, match="row 1, column 0"):
            exact_svd([[1.0, 2.0], [np.nan, 1.0]])


class TestRandomizedSVD:
    def test_noiseless_rank_two(self):
        inst = gen_low_rank_noise(50, 20, 2, [5.0, 2.0], seed=3)
        sub = randomized_truncated_svd(inst.matrix, 2, seed=1)
        top = exact_svd(inst.matrix).v[:, :2]
        assert principal_angle_similarity(sub, top) == pytest.approx(1.0, abs=1e-8)

    def test_planted_rank_four_large(self):
        inst = planted(1024, 256, 4, gap=10.0, sigma=0.01, seed=7)
        sub = randomized_truncated_svd(inst.matrix, 4, seed=0)
        oracle = exact_svd(inst.matrix).v[:, :4]
        assert principal_angle_similarity(sub, oracle) >= 0.999

    def test_rank_bounds(self, rng):
        x = rng.standard_normal((6, 4))
        for r in (0, 4, 5):
            with pytest.raises(InvalidRank):
                randomized_truncated_svd(x, r)

    def test_explained_uses_total_energy(self, rng):
        x = rng.standard_normal((30, 10))
        sub = randomized_truncated_svd(x, 3, seed=0)
        s = np.linalg.svd(x, compute_uv=False)
        np.testing.assert_allclose(sub.explained, s[:3] ** 2 / np.sum(s**2), rtol=1e-6)
        assert sub.explained.sum() < 1.0

    def test_bit_reproducible(self, rng):
        x = rng.standard_normal((64, 32))
        a = randomized_truncated_svd(x, 4, seed=11)
        b = randomized_truncated_svd(x.copy(), 4, seed=11)
        assert a.basis.tobytes() == b.basis.tobytes()
        assert a.explained.tobytes() == b.explained.tobytes()

    def test_basis_is_orthonormal_and_frozen(self, rng):
        sub = randomized_truncated_svd(rng.standard_normal((40, 12)), 5, seed=2)
        assert orthonormal_error(sub.basis) <= 1e-8
        with pytest.raises(ValueError):
            sub.basis[0, 0] = 1.0


class TestPrincipalAngles:
    def test_identical(self, rng):
        u = qr_orthonormalize(rng.standard_normal((6, 3)))
        assert principal_angle_similarity(u, u) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        e = np.eye(4)
        assert principal_angle_similarity(e[:, :2], e[:, 2:]) == pytest.approx(0.0, abs=1e-15)

    def test_single_planted_angle(self):
        theta = math.pi / 6
        a = span_of([1, 0, 0])
        b = span_of([math.cos(theta), math.sin(theta), 0])
        assert principal_angle_similarity(a, b) == pytest.approx(math.cos(theta), abs=1e-12)

    def test_aggregates(self):
        e = np.eye(4)
        theta = math.pi / 3
        b = np.column_stack([e[:, 0], math.cos(theta) * e[:, 1] + math.sin(theta) * e[:, 2]])
        a = e[:, :2]
        assert principal_angle_similarity(a, b, "mean") == pytest.approx(0.75)
        assert principal_angle_similarity(a, b, "min") == pytest.approx(0.5)
        assert principal_angle_similarity(a, b, "product") == pytest.approx(0.5)

    def test_mismatches(self, rng):
        a = qr_orthonormalize(rng.standard_normal((5, 2)))
        with pytest.raises(DimensionMismatch):
            principal_angle_similarity(a, qr_orthonormalize(rng.standard_normal((6, 2))))
        with pytest.raises(RankMismatch):
            principal_angle_similarity(a, qr_orthonormalize(rng.standard_normal((5, 3))))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 9), data=st.data())
    def test_symmetric_bounded_rotation_invariant(self, seed, d, data):
        r = data.draw(st.integers(1, d - 1))
        g = np.random.default_rng(seed)
        a = qr_orthonormalize(g.standard_normal((d, r)))
        b = qr_orthonormalize(g.standard_normal((d, r)))
        q, _ = np.linalg.qr(g.standard_normal((r, r)))
        sim = principal_angle_similarity(a, b)
        assert -1e-10 <= sim <= 1 + 1e-10
        assert sim == pytest.approx(principal_angle_similarity(b, a), abs=1e-12)
        assert abs(principal_angle_similarity(a @ q, b) - sim) < 1e-10
        assert abs(principal_angle_similarity(a, b @ q) - sim) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 4), ratio=st.floats(2.0, 8.0))
def test_randomized_agrees_with_exact_when_gap(seed, r, ratio):
    g = np.random.default_rng(seed)
    n, d = int(g.integers(r + 10, 120)), int(g.integers(r + 6, 40))
    spectrum = [ratio ** (r - j) for j in range(r)]
    inst = gen_low_rank_noise(n, d, r, spectrum, seed=seed)
    # noise well under 1% of the smallest retained singular value
    x = inst.matrix + 1e-3 * spectrum[-1] / np.sqrt(n * d) * g.standard_normal((n, d))
    sub = randomized_truncated_svd(x, r, seed=seed)
    assert principal_angle_similarity(sub, exact_svd(x).v[:, :r]) >= 0.999


def test_subspace_validation():
    with pytest.raises(ValueError):
        Subspace(np.eye(3)[:, :2], [0.5])
    with pytest.raises(DimensionMismatch):
        Subspace(np.eye(3)[:, :1], [1.0], mean=np.zeros(2))


def test_as_token_matrix_rejects_bad_shapes():
    with pytest.raises(ValueError):
        as_token_matrix(np.zeros(3))
    with pytest.raises(ValueError):
        as_token_matrix(np.zeros((0, 3)))
    with pytest.raises(NonFiniteValue, match="row 0, column 1"):
        as_token_matrix([[0.0, np.inf]])


def test_principal_cosines_sorted(rng):
    a = qr_orthonormalize(rng.standard_normal((7, 3)))
    b = qr_orthonormalize(rng.standard_normal((7, 3)))
    c = principal_cosines(a, b)
    assert np.all(np.diff(c) <= 0)
