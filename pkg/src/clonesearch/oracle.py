"""Brute-force exact nearest-neighbor search, the ground truth for recall.

Uses the same distance kernel and (distance, id) tie rule as the IVF index
so oracle-equality tests compare exactly, not set-approximately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ivf import l2sq_rows, top_k_by_distance

_CHUNK_ROWS = 65536


@dataclass(frozen=True)
class RecallReport:
    k: int
    n_queries: int
    recall_at_k: float


def brute_force_search(
    matrix: np.ndarray,
    query: np.ndarray,
    k: int,
    ids: np.ndarray | None = None,
) -> list[tuple[int, float]]:
    """Exact L2 top-k over every row; ``ids`` defaults to row indices."""
    query = np.ascontiguousarray(query, dtype=np.float32)
    n = matrix.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.uint64)
    cand_ids: list[np.ndarray] = []
    cand_d2: list[np.ndarray] = []
    for start in range(0, n, _CHUNK_ROWS):
        rows = matrix[start : start + _CHUNK_ROWS]
        d2 = l2sq_rows(rows, query)
        chunk_ids = ids[start : start + rows.shape[0]]
        top_i, top_d = top_k_by_distance(np.asarray(chunk_ids, dtype=np.uint64), d2, k)
        cand_ids.append(top_i)
        cand_d2.append(top_d)
    all_ids, all_d2 = top_k_by_distance(np.concatenate(cand_ids), np.concatenate(cand_d2), k)
    dists = np.sqrt(all_d2.astype(np.float64))
    return [(int(i), float(d)) for i, d in zip(all_ids, dists)]


def brute_force_topk_ids(
    matrix: np.ndarray, queries: np.ndarray, k: int, ids: np.ndarray | None = None
) -> list[list[int]]:
    return [
        [i for i, _ in brute_force_search(matrix, q, k, ids=ids)] for q in queries
    ]


def recall_at_k(
    approx: Sequence[Sequence[int]], exact: Sequence[Sequence[int]], k: int
) -> RecallReport:
    """Mean over queries of |approx ∩ exact| / k."""
    if len(approx) != len(exact):
        raise ValueError(f"{len(approx)} approx result lists vs {len(exact)} exact")
    if not approx:
        raise ValueError("no queries to score")
    total = 0.0
    for a, e in zip(approx, exact):
        total += len(set(a[:k]) & set(e[:k])) / k
    return RecallReport(k, len(approx), total / len(approx))
