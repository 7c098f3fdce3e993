"""Deterministic Lloyd's k-means with k-means++ seeding.

Fixed contract: at most 25 iterations or relative objective improvement
below 1e-4, argmin ties resolved to the lowest cluster index, and empty
clusters re-seeded from the farthest point of the largest cluster. All of
it is reproducible from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ITER = 25
REL_TOL = 1e-4

# Fixed chunk for row-blocked distance matmuls keeps BLAS call shapes (and
# therefore float rounding) independent of how callers batch their rows.
ASSIGN_CHUNK = 100_000


@dataclass
class TrainResult:
    centroids: np.ndarray  # (nlist, dim) float32
    objective: float  # sum of squared distances at the final assignment
    iterations: int


def assign_clusters(
    vectors: np.ndarray, centroids: np.ndarray, chunk: int = ASSIGN_CHUNK
) -> np.ndarray:
    """Nearest-centroid index per row (L2, ties to the lowest index)."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    centroids = np.ascontiguousarray(centroids, dtype=np.float32)
    out = np.empty(vectors.shape[0], dtype=np.int64)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    for start in range(0, vectors.shape[0], chunk):
        block = vectors[start : start + chunk]
        # ||x-c||^2 = ||x||^2 - 2 x.c + ||c||^2; ||x||^2 constant per row
        scores = block @ centroids.T
        scores *= -2.0
        scores += c_sq
        out[start : start + block.shape[0]] = np.argmin(scores, axis=1)
    return out


def _sq_dist_to_centroids(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    v_sq = np.einsum("ij,ij->i", vectors, vectors)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d2 = v_sq[:, None] - 2.0 * (vectors @ centroids.T) + c_sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centers[0] = x[first]
    min_d2 = np.einsum("ij,ij->i", x - centers[0], x - centers[0]).astype(np.float64)
    for c in range(1, k):
        total = float(min_d2.sum())
        if total <= 0.0:
            # every remaining point coincides with a chosen center
            centers[c] = x[int(rng.integers(n))]
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(min_d2), r, side="right"))
        idx = min(idx, n - 1)
        centers[c] = x[idx]
        diff = x - centers[c]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    return centers


def train_kmeans(
    sample: np.ndarray,
    nlist: int,
    seed: int,
    max_iter: int = MAX_ITER,
    rel_tol: float = REL_TOL,
) -> TrainResult:
    """Cluster ``sample`` into ``nlist`` centroids.

    Raises ValueError when the sample is smaller than nlist; the caller
    should lower nlist (or enlarge the training sample).
    """
    x = np.ascontiguousarray(sample, dtype=np.float32)
    n = x.shape[0]
    if nlist < 1:
        raise ValueError("nlist must be >= 1")
    if n < nlist:
        raise ValueError(
            f"training sample has {n} rows but nlist={nlist}; lower nlist to at most {n}"
        )
    if nlist == 1:
        centroid = x.mean(axis=0, dtype=np.float64).astype(np.float32)[None, :]
        d2 = _sq_dist_to_centroids(x, centroid)
        return TrainResult(centroid, float(d2.sum()), 0)

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, nlist, rng)

    prev_obj = np.inf
    iterations = 0
    objective = 0.0
    for it in range(max_iter):
        iterations = it + 1
        d2 = _sq_dist_to_centroids(x, centroids)
        labels = np.argmin(d2, axis=1)
        objective = float(d2[np.arange(n), labels].sum())

        counts = np.bincount(labels, minlength=nlist)
        empties = np.flatnonzero(counts == 0)
        for empty in empties:
            donor = int(np.argmax(counts))
            members = np.flatnonzero(labels == donor)
            far = members[int(np.argmax(d2[members, donor]))]
            labels[far] = empty
            counts[donor] -= 1
            counts[empty] += 1

        sums = np.zeros((nlist, x.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, x)
        centroids = (sums / counts[:, None]).astype(np.float32)

        if prev_obj < np.inf and prev_obj > 0.0:
            if (prev_obj - objective) / prev_obj < rel_tol:
                break
        if objective == 0.0:
            break
        prev_obj = objective

    # final objective under the final centroids
    d2 = _sq_dist_to_centroids(x, centroids)
    objective = float(np.min(d2, axis=1).sum())
    return TrainResult(centroids, objective, iterations)
