"""Orthogonal initialization and K-means clustering (numpy, seeded)."""

from __future__ import annotations

import numpy as np

from .rng import RngStream
from .tensor import ContractViolation


def orthogonal_init(n_vectors: int, dim: int, rng: RngStream) -> np.ndarray:
    """Rows are unit-norm and pairwise orthogonal (QR of a Gaussian draw)."""
    if n_vectors > dim:
        raise ContractViolation(
            f"orthogonal_init: {n_vectors} mutually orthogonal vectors "
            f"cannot exist in dimension {dim}"
        )
    gauss = rng.normal((dim, n_vectors))
    q, r = np.linalg.qr(gauss)
    # canonical sign so the result is unique given the draw
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def orthogonal_complement_vector(
    existing: np.ndarray, dim: int, rng: RngStream
) -> np.ndarray:
    """Unit vector orthogonal to every row of ``existing`` (Gram-Schmidt)."""
    if existing.shape[0] >= dim:
        raise ContractViolation(
            f"no orthogonal direction left: {existing.shape[0]} keys fill dim {dim}"
        )
    for _ in range(16):
        v = rng.normal((dim,))
        if existing.size:
            v = v - existing.T @ (existing @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    raise RuntimeError("Gram-Schmidt draws kept degenerating; RNG stream broken?")


def kmeans(
    points: np.ndarray,
    n_clusters: int,
    rng: RngStream,
    max_iters: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, assignments). The within-cluster squared-distance
    objective is non-increasing per iteration; empty clusters are re-seeded
    at the point farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    if m < n_clusters:
        raise ContractViolation(
            f"kmeans: {m} points cannot fill {n_clusters} clusters"
        )
    if d < 1:
        raise ContractViolation("kmeans: dimension must be >= 1")

    centroids = _kmeanspp_seeds(points, n_clusters, rng)
    assign = np.zeros(m, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        nearest = d2[np.arange(m), new_assign]
        for c in range(n_clusters):
            mask = new_assign == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                far = int(nearest.argmax())
                centroids[c] = points[far]
                new_assign[far] = c
                nearest[far] = 0.0
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centroids, assign


def kmeans_objective(
    points: np.ndarray, centroids: np.ndarray, assign: np.ndarray
) -> float:
    diff = points - centroids[assign]
    return float((diff * diff).sum())


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |p|^2 - 2 p.c + |c|^2 via matmul; tiny negatives from cancellation -> 0
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * (points @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_seeds(points: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    m = points.shape[0]
    seeds = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, m))
    seeds[0] = points[first]
    d2 = ((points - seeds[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, m))
        else:
            u = float(rng.uniform()) * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, m - 1)
        seeds[i] = points[idx]
        d2 = np.minimum(d2, ((points - seeds[i]) ** 2).sum(axis=1))
    return seeds
