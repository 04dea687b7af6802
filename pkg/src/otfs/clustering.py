"""Seeded k-means (greedy k-means++ start, Lloyd iterations) and Davies-Bouldin."""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateClusteringError, MetricUndefinedError, ShapeError


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per row; ties go to the lowest index."""
    if x.shape[1] != centers.shape[1]:
        raise ShapeError(f"dimension mismatch: {x.shape[1]} vs {centers.shape[1]}")
    return np.argmin(sq_dists(x, centers), axis=1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (``2 + log k`` candidates per step)."""
    n = x.shape[0]
    trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = sq_dists(x, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center
            centers[c] = x[rng.integers(n)]
            continue
        cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * total)
        cand = np.minimum(cand, n - 1)
        cand_d = np.minimum(closest[None, :], sq_dists(x[cand], x))
        best = int(np.argmin(cand_d.sum(axis=1)))
        centers[c] = x[cand[best]]
        closest = cand_d[best]
    return centers


def kmeans(x, k: int, seed=0, max_iter: int = 100, rel_tol: float = 1e-6):
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops when the largest centroid shift, relative to the data scale,
    falls below ``rel_tol``.  Empty clusters are refilled with the point
    farthest from its current centroid.

    Returns ``(centers, assignment)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n_distinct = np.unique(x, axis=0).shape[0]
    if k > n_distinct:
        raise DegenerateClusteringError(f"{k} clusters requested but only {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    scale = max(float(np.abs(x).max()), 1e-12)
    for _ in range(max_iter):
        labels = nearest(x, centers)
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts):
            new[j] = x[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            d = np.einsum("ij,ij->i", x - new[labels], x - new[labels])
            far = int(np.argmax(d))
            new[j] = x[far]
            labels[far] = j
        shift = float(np.abs(new - centers).max()) / scale
        centers = new
        if shift < rel_tol:
            break
    return centers, nearest(x, centers)


def davies_bouldin(x, labels, n_clusters: int | None = None) -> float:
    """Davies-Bouldin index with euclidean scatter and centroid distances.

    Every cluster id in ``range(n_clusters)`` must be populated.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if n_clusters is None else n_clusters
    if k < 2:
        raise MetricUndefinedError("Davies-Bouldin needs at least two clusters")
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise MetricUndefinedError(f"empty clusters: {np.flatnonzero(counts == 0).tolist()}")
    centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    scatter = np.array([np.linalg.norm(x[labels == j] - centroids[j], axis=1).mean() for j in range(k)])
    sep = np.sqrt(sq_dists(centroids, centroids))
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0):
        raise MetricUndefinedError("coincident cluster centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())
