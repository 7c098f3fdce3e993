"""Turn raw nearest-neighbor hits into ranked clone candidates.

Scores are cosine similarities recovered from unit-vector L2 distances
(cos = 1 - d^2/2). Thresholding happens before the global sort; the global
ranking is by (score desc, query_id asc, corpus_id asc) and equals the
sorted prefix of the concatenated per-query hit union.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IntegrityError, UsageError
from .metadata import MetadataStore

DEFAULT_THRESHOLD = 0.95
DEFAULT_TOP_K = 100


@dataclass(frozen=True)
class ScoredHit:
    query_id: int
    corpus_id: int
    score: float  # cosine in [-1, 1]


@dataclass
class QueryResult:
    query_id: int
    hits: list[ScoredHit] = field(default_factory=list)  # descending score


@dataclass
class GlobalResult:
    hits: list[ScoredHit] = field(default_factory=list)  # globally descending


def score(l2_distance: float) -> float:
    """Cosine similarity of two unit vectors at the given L2 distance."""
    return max(-1.0, min(1.0, 1.0 - (l2_distance * l2_distance) / 2.0))


def hits_from_search(query_id: int, raw: Iterable[tuple[int, float]]) -> QueryResult:
    return QueryResult(
        query_id=query_id,
        hits=[ScoredHit(query_id, corpus_id, score(dist)) for corpus_id, dist in raw],
    )


def per_query_topk(
    results: Sequence[QueryResult], threshold: float
) -> list[QueryResult]:
    """Drop hits below the threshold; per-query order is preserved."""
    return [
        QueryResult(r.query_id, [h for h in r.hits if h.score >= threshold])
        for r in results
    ]


def _rank_key(hit: ScoredHit):
    return (-hit.score, hit.query_id, hit.corpus_id)


def global_topk(batch: Sequence[QueryResult], k_global: int) -> GlobalResult:
    """Best k_global hits across all queries in the batch."""
    if k_global < 1:
        raise UsageError("k_global must be >= 1")
    merged = sorted((h for r in batch for h in r.hits), key=_rank_key)
    return GlobalResult(hits=merged[:k_global])


@dataclass(frozen=True)
class Location:
    path: str
    start_line: int
    end_line: int


@dataclass
class DisplayRecord:
    rank: int
    score: float
    query: Location
    corpus: Location
    duplicate_locations: list[Location]

    def to_json(self) -> str:
        return json.dumps(
            {
                "rank": self.rank,
                "score": round(self.score, 6),
                "query": vars(self.query),
                "corpus": vars(self.corpus),
                "duplicate_locations": [vars(loc) for loc in self.duplicate_locations],
            },
            sort_keys=True,
        )


def expand_duplicates(
    hits: Sequence[ScoredHit],
    store: MetadataStore,
    query_locations: dict[int, Location],
) -> list[DisplayRecord]:
    """Attach every Type-1 duplicate location to its representative's entry.

    The ranked list length never changes: duplicates annotate the hit, they
    do not consume result slots.
    """
    records: list[DisplayRecord] = []
    for rank, hit in enumerate(hits, start=1):
        try:
            rep = store.get(hit.corpus_id)
        except IntegrityError as exc:
            raise IntegrityError(
                f"search returned corpus id {hit.corpus_id} with no metadata row; "
                f"index and metadata are out of sync"
            ) from exc
        group = store.duplicates_of(hit.corpus_id)
        locations = [Location(m.file_path, m.start_line, m.end_line) for m in group]
        if not locations:
            locations = [Location(rep.file_path, rep.start_line, rep.end_line)]
        records.append(
            DisplayRecord(
                rank=rank,
                score=hit.score,
                query=query_locations[hit.query_id],
                corpus=Location(rep.file_path, rep.start_line, rep.end_line),
                duplicate_locations=locations,
            )
        )
    return records


@dataclass(frozen=True)
class CurvePoint:
    k_global: int
    recall: float
    precision: float


def recall_precision_curve(
    batch: Sequence[QueryResult],
    labels: set[tuple[int, int]],
    sweep: Sequence[int] | None = None,
) -> list[CurvePoint]:
    """Recall/precision of the global ranking against labeled clone pairs.

    recall(k) = |true pairs in top-k| / |all true pairs|
    precision(k) = |true pairs in top-k| / k
    """
    if not labels:
        raise UsageError("cannot compute a recall/precision curve without labels")
    all_hits = sorted((h for r in batch for h in r.hits), key=_rank_key)
    if sweep is None:
        sweep = sorted({1, 5, 10, 20, 50, 100, len(all_hits)} - {0})
    points = []
    for k in sweep:
        top = all_hits[:k]
        true_in_top = sum((h.query_id, h.corpus_id) in labels for h in top)
        points.append(
            CurvePoint(
                k_global=k,
                recall=true_in_top / len(labels),
                precision=true_in_top / k if k else 0.0,
            )
        )
    return points


def write_curve_csv(points: Sequence[CurvePoint], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k_global", "recall", "precision"])
        for p in points:
            writer.writerow([p.k_global, f"{p.recall:.6f}", f"{p.precision:.6f}"])


def format_table(records: Sequence[DisplayRecord]) -> str:
    """Human-readable result table."""
    if not records:
        return "(no hits)"
    lines = [f"{'rank':>4}  {'score':>8}  {'query':<40} {'corpus':<40} dups"]
    for r in records:
        q = f"{r.query.path}:{r.query.start_line}-{r.query.end_line}"
        c = f"{r.corpus.path}:{r.corpus.start_line}-{r.corpus.end_line}"
        lines.append(
            f"{r.rank:>4}  {r.score:>8.4f}  {q:<40} {c:<40} {len(r.duplicate_locations)}"
        )
    return "\n".join(lines)
