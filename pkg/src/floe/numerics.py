"""Numerical kernel: softmax, cosine, truncated SVD and k-means with silhouette.

Matrices and vectors are plain float64 numpy arrays. The SVD and clustering
routines are written out here rather than delegated to LAPACK or scikit-learn
so their iteration order, tie-breaking and seeding are fully pinned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math

import numpy as np

from .errors import (
    DegenerateClustering,
    DegenerateVector,
    EmptyInput,
    RankOutOfRange,
    ShapeMismatch,
    TooFewPoints,
)

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
KMEANS_MAX_ITERS = 50


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Shift-invariant softmax.

    Subtracting the maximum keeps ``exp`` in range even for scores near
    +-1e300.
    """
    s = as_vector(scores)
    if s.size == 0:
        raise EmptyInput("softmax of an empty vector")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (s - s.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def unit(v) -> np.ndarray:
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateVector("cannot normalize a zero vector")
    return v / n


def cosine(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine with a zero-norm vector")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


# ---------------------------------------------------------------------------
# Truncated SVD via one-sided (Hestenes) Jacobi rotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SVDResult:
    u: np.ndarray  # rows x r, orthonormal columns
    s: np.ndarray  # r, nonincreasing
    v: np.ndarray  # cols x r, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def __iter__(self):
        return iter((self.u, self.s, self.v))


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full thin SVD of a tall matrix (rows >= cols).

    Returns (U, s, V) with U rows x cols, columns of U for zero singular
    values left as zero vectors (filled in by the caller).
    """
    m, n = a.shape
    # columns are rotated as contiguous rows of the transposes
    wt = np.array(a.T, dtype=np.float64, order="C")
    vt = np.eye(n)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = wt[p], wt[q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if alpha == 0.0 or beta == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                if ratio > off:
                    off = ratio
                if ratio <= JACOBI_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wt[p], wt[q] = c * wp - s * wq, s * wp + c * wq
                vp, vq = vt[p], vt[q]
                vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if off <= JACOBI_TOL:
            break
    work = wt.T
    v = vt.T
    sigma = np.linalg.norm(work, axis=0)
    # stable sort keeps original column order among equal values
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    for j in range(n):
        if sigma[j] > scale * 1e-15:
            u[:, j] = work[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
    return u, sigma, v


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` where ``filled`` is False with unit
    vectors orthogonal to every other column (Gram-Schmidt on the basis)."""
    m, r = u.shape
    out = u.copy()
    basis = [out[:, j] for j in range(r) if filled[j]]
    e_idx = 0
    for j in range(r):
        if filled[j]:
            continue
        while e_idx < m:
            cand = np.zeros(m)
            cand[e_idx] = 1.0
            e_idx += 1
            for b in basis:
                cand -= (b @ cand) * b
            for b in basis:  # second pass for numerical orthogonality
                cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                out[:, j] = cand / norm
                basis.append(out[:, j])
                break
    return out


def truncated_svd(m, r: int) -> SVDResult:
    """Rank-``r`` SVD ``m ~= U diag(S) V^T``, Frobenius-optimal."""
    a = as_matrix(m)
    rows, cols = a.shape
    if not 1 <= r <= min(rows, cols):
        raise RankOutOfRange(f"rank {r} outside [1, {min(rows, cols)}]")
    if rows >= cols:
        u, s, v = _jacobi_tall(a)
    else:
        v, s, u = _jacobi_tall(a.T)
    u, s, v = u[:, :r], s[:r].copy(), v[:, :r]
    if not (s > 0).all():
        u = _complete_orthonormal(u, np.linalg.norm(u, axis=0) > 0.5)
        v = _complete_orthonormal(v, np.linalg.norm(v, axis=0) > 0.5)
    return SVDResult(u=u, s=s, v=v)


# ---------------------------------------------------------------------------
# k-means++ / Lloyd and silhouette
# ---------------------------------------------------------------------------


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pairwise_distances(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    d2 = _sq_dists(x, x)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    d2 = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every point coincides with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(points[idx])
        d2 = np.minimum(d2, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return np.array(centers)


def kmeans(points, k: int, rng: np.random.Generator, max_iters: int = KMEANS_MAX_ITERS):
    """Lloyd iterations from a k-means++ start.

    Returns ``(labels, centers, sse)``. Ties in assignment go to the lowest
    cluster index; an emptied cluster keeps its previous center.
    """
    x = np.asarray(points, dtype=np.float64)
    centers = kmeans_pp_init(x, k, rng)
    labels = np.full(x.shape[0], -1)
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(x, centers), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    sse = float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum())
    return labels, centers, sse


def silhouette_samples(points, labels) -> np.ndarray:
    """Per-point silhouette with Euclidean distance.

    Singleton clusters score 0. Raises DegenerateClustering if fewer than two
    clusters are populated.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise DegenerateClustering("silhouette needs at least two populated clusters")
    dist = pairwise_distances(points)
    n = len(labels)
    out = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = dist[i, own].sum() / n_own
        b = min(dist[i, labels == c].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        out[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return out


def silhouette_score(points, labels) -> float:
    return float(silhouette_samples(points, labels).mean())


@dataclass(frozen=True)
class ClusteringResult:
    labels: np.ndarray
    m: int
    score: float

    def __iter__(self):
        return iter((self.labels, self.m, self.score))


def kmeans_silhouette(
    points: Sequence,
    m_range: tuple[int, int],
    seed: int,
    max_iters: int = KMEANS_MAX_ITERS,
    n_init: int = 4,
) -> ClusteringResult:
    """Pick the cluster count in ``m_range`` (inclusive) with the best mean
    silhouette. Each count keeps the lowest-SSE of ``n_init`` seeded restarts;
    ties in silhouette go to the smaller count."""
    from .rng import derive

    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("points must be a sequence of equal-length vectors")
    n = x.shape[0]
    m_lo, m_hi = m_range
    if m_lo < 2 or m_lo > m_hi:
        raise ValueError(f"bad m_range {m_range}")
    if n <= m_lo:
        raise TooFewPoints(f"{n} points cannot form {m_lo} clusters with a silhouette")
    m_hi = min(m_hi, n - 1)

    best: ClusteringResult | None = None
    for m in range(m_lo, m_hi + 1):
        runs = []
        for restart in range(n_init):
            labels, _, sse = kmeans(x, m, derive(seed, "kmeans", m, restart), max_iters)
            runs.append((sse, restart, labels))
        runs.sort(key=lambda t: (t[0], t[1]))
        labels = _canonical_labels(runs[0][2])
        try:
            score = silhouette_score(x, labels)
        except DegenerateClustering:
            continue
        if best is None or score > best.score:
            best = ClusteringResult(labels=labels, m=int(labels.max()) + 1, score=score)
    if best is None:
        raise DegenerateClustering("no cluster count produced two populated clusters")
    return best


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out
