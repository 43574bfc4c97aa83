import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floe.errors import (
    DegenerateClustering,
    DegenerateVector,
    EmptyInput,
    RankOutOfRange,
    ShapeMismatch,
    TooFewPoints,
)
from floe.numerics import (
    cosine,
    kmeans_silhouette,
    silhouette_samples,
    softmax,
    truncated_svd,
)


# --- independent oracle: singular values from the characteristic polynomial


def _sym_eigs_charpoly(s):
    """Eigenvalues of a symmetric 2x2 or 3x3 matrix from its characteristic
    polynomial (closed-form roots), descending."""
    n = s.shape[0]
    if n == 1:
        return np.array([s[0, 0]])
    if n == 2:
        tr = s[0, 0] + s[1, 1]
        det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
        disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
        return np.array([tr / 2 + disc, tr / 2 - disc])
    # trigonometric solution of the depressed cubic
    q = np.trace(s) / 3
    p1 = s[0, 1] ** 2 + s[0, 2] ** 2 + s[1, 2] ** 2
    p2 = (s[0, 0] - q) ** 2 + (s[1, 1] - q) ** 2 + (s[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6)
    if p == 0:
        return np.array([q, q, q])
    bmat = (s - q * np.eye(3)) / p
    r = np.linalg.det(bmat) / 2
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    e2 = 3 * q - e1 - e3
    return np.array(sorted([e1, e2, e3], reverse=True))


def _singular_values_oracle(m):
    g = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    return np.sqrt(np.clip(_sym_eigs_charpoly(g), 0.0, None))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_closed_form(self):
        # e^0 / (e^0 + 3)
        np.testing.assert_allclose(softmax([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)

    def test_shift_invariant(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0]), [0.5, 0.5], atol=0)

    def test_huge_scores(self):
        out = softmax([1e300, -1e300, 0.0])
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            softmax([])

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e300, 1e300)))
    def test_properties(self, s):
        out = softmax(s)
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0) and np.all(out <= 1.0)
        # the top score keeps the top probability (ties only from rounding)
        assert out[np.argmax(s)] == out.max()


class TestCosine:
    def test_identity(self):
        assert cosine([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert cosine([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)

    def test_zero_norm(self):
        with pytest.raises(DegenerateVector):
            cosine([0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            cosine([1, 0], [1, 0, 0])


class TestTruncatedSVD:
    def test_rank_one_exact(self):
        u = np.array([1.0, -2.0, 0.5])
        v = np.array([3.0, 1.0, -1.0, 2.0])
        m = np.outer(u, v)
        res = truncated_svd(m, 1)
        assert np.linalg.norm(m - res.reconstruct()) <= 1e-9

    def test_diag(self):
        res = truncated_svd(np.diag([2.0, 1.0]), 1)
        np.testing.assert_allclose(res.s, [2.0], atol=1e-12)
        err = np.linalg.norm(np.diag([2.0, 1.0]) - res.reconstruct()) ** 2
        assert err == pytest.approx(1.0, abs=1e-12)

    def test_zero_matrix(self):
        res = truncated_svd(np.zeros((3, 2)), 1)
        np.testing.assert_array_equal(res.s, [0.0])
        np.testing.assert_array_equal(res.reconstruct(), np.zeros((3, 2)))
        assert np.linalg.norm(res.u[:, 0]) == pytest.approx(1.0)

    @pytest.mark.parametrize("r", [0, 3])
    def test_rank_out_of_range(self, r):
        with pytest.raises(RankOutOfRange):
            truncated_svd(np.ones((2, 5)), r)

    @pytest.mark.parametrize("shape", [(5, 3), (3, 5), (4, 4), (7, 2)])
    def test_orthonormal_factors(self, shape):
        rng = np.random.default_rng(0)
        m = rng.normal(size=shape)
        for r in range(1, min(shape) + 1):
            u, s, v = truncated_svd(m, r)
            assert np.abs(u.T @ u - np.eye(r)).max() <= 1e-8
            assert np.abs(v.T @ v - np.eye(r)).max() <= 1e-8
            assert np.all(np.diff(s) <= 0) and np.all(s >= 0)

    def test_rank_deficient_completion(self):
        m = np.zeros((4, 3))
        m[0, 0] = 5.0
        u, s, v = truncated_svd(m, 3)
        np.testing.assert_allclose(s, [5.0, 0.0, 0.0])
        assert np.abs(u.T @ u - np.eye(3)).max() <= 1e-8
        assert np.abs(v.T @ v - np.eye(3)).max() <= 1e-8

    def test_error_monotone_in_rank(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(6, 5))
        errs = [np.linalg.norm(m - truncated_svd(m, r).reconstruct()) for r in range(1, 6)]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-8 * np.linalg.norm(m)

    def test_full_rank_recovers_low_rank_input(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
        assert np.linalg.norm(m - truncated_svd(m, 2).reconstruct()) <= 1e-8 * np.linalg.norm(m)

    def test_charpoly_oracle_corpus(self):
        rng = np.random.default_rng(2024)
        shapes = [(2, 2), (3, 3), (2, 3), (3, 2)]
        for trial in range(200):
            shape = shapes[trial % len(shapes)]
            m = rng.normal(size=shape) * rng.uniform(0.1, 10)
            want = _singular_values_oracle(m)
            k = min(shape)
            got = truncated_svd(m, k).s
            np.testing.assert_allclose(got, want[:k], atol=1e-6)
            for r in range(1, k):
                res = truncated_svd(m, r)
                tail = np.sum(want[r:k] ** 2)
                assert np.linalg.norm(m - res.reconstruct()) ** 2 == pytest.approx(tail, abs=1e-6)

    def test_matches_lapack_on_larger(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(16, 12))
        np.testing.assert_allclose(truncated_svd(m, 12).s, np.linalg.svd(m, compute_uv=False), atol=1e-10)


def _brute_force_two_partition(points):
    """Minimum-SSE 2-partition by enumerating every labelling."""
    n = len(points)
    best = None
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.min() == labels.max():
            continue
        sse = sum(((points[labels == c] - points[labels == c].mean(0)) ** 2).sum() for c in (0, 1))
        if best is None or sse < best[0]:
            best = (sse, labels)
    return best[1]


class TestKMeansSilhouette:
    def _two_groups(self, seed=0):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-0.01, 0.01, size=(5, 2))
        b = np.array([10.0, 10.0]) + rng.uniform(-0.01, 0.01, size=(5, 2))
        return np.vstack([a, b])

    def test_two_groups(self):
        pts = self._two_groups()
        res = kmeans_silhouette(pts, (2, 4), seed=1)
        assert res.m == 2
        oracle = _brute_force_two_partition(pts)
        same = all((res.labels[i] == res.labels[j]) == (oracle[i] == oracle[j])
                   for i in range(len(pts)) for j in range(len(pts)))
        assert same

    def test_identical_points_degenerate(self):
        with pytest.raises(DegenerateClustering):
            kmeans_silhouette(np.ones((6, 3)), (2, 4), seed=0)

    def test_equidistant_point_scores_zero(self):
        pts = np.array([[-1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        labels = np.array([0, 0, 1, 1, 0])
        s = silhouette_samples(pts, labels)
        assert s[4] == pytest.approx(0.0, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            kmeans_silhouette(np.eye(2), (2, 3), seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(30, 4))
        a = kmeans_silhouette(pts, (2, 6), seed=42)
        b = kmeans_silhouette(pts, (2, 6), seed=42)
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.m == b.m and a.score == b.score

    def test_labels_in_range(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(20, 3))
        res = kmeans_silhouette(pts, (2, 5), seed=0)
        assert res.labels.min() == 0 and res.labels.max() == res.m - 1
        assert -1.0 <= res.score <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_silhouette_matches_naive(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(9, 2))
        labels = rng.integers(0, 3, size=9)
        labels[:3] = [0, 1, 2]
        got = silhouette_samples(pts, labels)
        for i in range(9):
            d = lambda j: math.dist(pts[i], pts[j])
            own = [j for j in range(9) if labels[j] == labels[i] and j != i]
            if not own:
                assert got[i] == 0.0
                continue
            a = sum(map(d, own)) / len(own)
            b = min(
                np.mean([d(j) for j in range(9) if labels[j] == c])
                for c in set(labels.tolist()) - {labels[i]}
            )
            assert got[i] == pytest.approx((b - a) / max(a, b), abs=1e-12)
