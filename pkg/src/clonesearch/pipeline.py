"""End-to-end orchestration: corpus indexing and clone querying.

Indexing runs scan -> extract -> dedup -> embed -> train -> add_batch ->
merge -> metadata, with a checkpoint written every flush so a failed run
can resume without re-embedding. Fragment ids are parse order over the
deterministic corpus scan; the representative of each Type-1 class keeps
its id as the vector id inside the IVF index.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dedup import DedupCache, fingerprint
from .embedding import (
    EmbedderConfig,
    IdsWriter,
    MatrixWriter,
    make_embedder,
    open_matrix,
    read_ids,
    read_matrix_header,
)
from .errors import IntegrityError, UsageError
from .ivf import (
    IndexBuilder,
    IvfIndex,
    MANIFEST_NAME,
    SearchParams,
    compute_nlist,
    compute_nprobe,
    compute_sample_size,
)
from .kmeans import train_kmeans
from .metadata import FragmentMeta, MetadataStore
from .parser import (
    DEFAULT_EXTENSIONS,
    FileParseResult,
    ScanStats,
    parse_file,
    parse_source,
    read_source_text,
    scan_corpus,
)
from .results import (
    DisplayRecord,
    Location,
    QueryResult,
    expand_duplicates,
    global_topk,
    hits_from_search,
    per_query_topk,
)

logger = logging.getLogger(__name__)

MATRIX_FILE = "embeddings.dbse"
IDS_FILE = "embeddings.ids"
DEDUP_FILE = "dedup.bin"
METADATA_FILE = "metadata.sqlite"
STATS_FILE = "stats.json"
CHECKPOINT_FILE = "checkpoint.json"

CHECKPOINT_EVERY = 10_000
EMBED_CHUNK = 1024


@dataclass
class IndexConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    extensions: frozenset = DEFAULT_EXTENSIONS
    nlist: int | None = None  # None -> 8*sqrt(N) heuristic
    segment_size: int = 100_000  # vectors per on-disk segment
    seed: int = 42
    dedup: bool = True
    force: bool = False
    resume: bool = False
    threads: int = 1  # parse worker pool; output order stays deterministic


@dataclass
class IndexReport:
    files_scanned: int
    files_cleaned: int
    functions_parsed: int
    parse_time: float
    embeddings: int
    embed_time: float
    index_time: float
    disk_bytes: int
    duplicates: int
    nlist: int
    dim: int

    def as_dict(self) -> dict:
        return {
            "files_scanned": self.files_scanned,
            "files_cleaned": self.files_cleaned,
            "functions_parsed": self.functions_parsed,
            "parse_time": round(self.parse_time, 3),
            "embeddings": self.embeddings,
            "embed_time": round(self.embed_time, 3),
            "index_time": round(self.index_time, 3),
            "disk_bytes": self.disk_bytes,
            "duplicates": self.duplicates,
            "nlist": self.nlist,
            "dim": self.dim,
        }


def _dir_bytes(root: Path) -> int:
    return sum(p.stat().st_size for p in root.rglob("*") if p.is_file())


def _iter_parsed(corpus_root: Path, cfg: IndexConfig, stats: ScanStats):
    """Yield FileParseResults in deterministic scan order.

    Extraction is pure per file, so with threads > 1 files parse on a
    worker pool; the ordered map keeps id assignment identical to a
    sequential run.
    """
    if cfg.threads <= 1:
        for source in scan_corpus(corpus_root, cfg.extensions, stats=stats):
            yield parse_source(read_source_text(source.path), source.path)
        return
    from concurrent.futures import ThreadPoolExecutor

    sources = list(scan_corpus(corpus_root, cfg.extensions, stats=stats))
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        yield from pool.map(
            lambda src: parse_source(read_source_text(src.path), src.path), sources
        )


class _Checkpoint:
    def __init__(self, path: Path):
        self.path = path

    def load(self) -> dict | None:
        if self.path.exists():
            return json.loads(self.path.read_text())
        return None

    def save(self, payload: dict) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        os.replace(tmp, self.path)

    def clear(self) -> None:
        self.path.unlink(missing_ok=True)


def index_corpus(corpus_root: Path, index_dir: Path, cfg: IndexConfig) -> IndexReport:
    corpus_root = Path(corpus_root)
    index_dir = Path(index_dir)
    index_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = _Checkpoint(index_dir / CHECKPOINT_FILE)

    if (index_dir / MANIFEST_NAME).exists() and not (cfg.force or cfg.resume):
        raise UsageError(
            f"{index_dir} already holds an index; pass --force to rebuild"
        )
    state = checkpoint.load() if cfg.resume else None
    if cfg.force:
        for name in (MATRIX_FILE, IDS_FILE, DEDUP_FILE, METADATA_FILE, STATS_FILE):
            (index_dir / name).unlink(missing_ok=True)
        checkpoint.clear()
        state = None

    # The checkpoint is the source of truth: on resume every artifact rolls
    # back to exactly the checkpointed counts before new fragments land.
    fragments_done = int(state["fragments_done"]) if state else 0
    embedded_rows = int(state["embedded_rows"]) if state else 0
    if state:
        logger.info(
            "resuming: %d fragments / %d embeddings already persisted",
            fragments_done,
            embedded_rows,
        )

    embedder = make_embedder(cfg.embedder)
    cache = (
        DedupCache.load(index_dir / DEDUP_FILE)
        if state and (index_dir / DEDUP_FILE).exists()
        else DedupCache()
    )
    store = MetadataStore(index_dir / METADATA_FILE)
    store.delete_from(fragments_done)
    matrix = MatrixWriter(
        index_dir / MATRIX_FILE,
        cfg.embedder.dim,
        append=bool(state),
        truncate_to=embedded_rows if state else None,
    )
    ids_out = IdsWriter(
        index_dir / IDS_FILE,
        append=bool(state),
        truncate_to=embedded_rows if state else None,
    )

    stats = ScanStats()
    t_parse = 0.0
    t_embed = 0.0
    fragment_seq = 0
    pending: list = []  # unique fragments awaiting embedding

    def flush_embeds():
        nonlocal t_embed
        if not pending:
            return
        t0 = time.monotonic()
        vecs = embedder.embed_fragments([f for _, f in pending])
        t_embed += time.monotonic() - t0
        matrix.append(vecs)
        ids_out.append(np.array([fid for fid, _ in pending], dtype="<u8"))
        pending.clear()

    def save_checkpoint():
        flush_embeds()
        store.flush()
        cache.save(index_dir / DEDUP_FILE)
        matrix.sync_header()
        ids_out.sync_header()
        checkpoint.save({"fragments_done": fragment_seq, "embedded_rows": matrix.count})

    try:
        parse_start = time.monotonic()
        for result in _iter_parsed(corpus_root, cfg, stats):
            stats.functions_parsed += len(result.fragments)
            if result.partially_parsed:
                stats.partially_parsed_files += 1
            for frag in result.fragments:
                fid = fragment_seq
                if fid >= fragments_done and frag.token_stream:
                    fp = fingerprint(frag.token_stream)
                    if cfg.dedup:
                        decision = cache.check_and_register(fp, candidate_id=fid)
                    else:
                        # salted fingerprint: every fragment indexes separately
                        decision = cache.check_and_register(
                            fingerprint((str(fid),) + frag.token_stream),
                            candidate_id=fid,
                        )
                    rep = None if decision.is_unique else decision.representative_id
                    store.put(
                        FragmentMeta(
                            fragment_id=fid,
                            file_path=str(frag.file_path),
                            start_line=frag.start_line,
                            end_line=frag.end_line,
                            fingerprint=fp.digest,
                            representative_id=rep,
                        )
                    )
                    if decision.is_unique:
                        pending.append((fid, frag))
                elif fid >= fragments_done:
                    stats.rejected_empty += 1
                fragment_seq += 1
                if fragment_seq % CHECKPOINT_EVERY == 0:
                    save_checkpoint()
                elif len(pending) >= EMBED_CHUNK:
                    flush_embeds()
        flush_embeds()
        store.flush()
        t_parse = (time.monotonic() - parse_start) - t_embed
        stats.parse_time_s = t_parse
    except Exception:
        # leave the last periodic checkpoint in place for --resume
        store.close()
        matrix.close()
        ids_out.close()
        raise

    cache.save(index_dir / DEDUP_FILE)
    matrix.close()
    ids_out.close()

    n_vectors = matrix.count
    if n_vectors == 0:
        store.close()
        checkpoint.clear()
        raise UsageError(f"nothing to index under {corpus_root}: no functions found")

    t1 = time.monotonic()
    mm = open_matrix(index_dir / MATRIX_FILE)
    vec_ids = read_ids(index_dir / IDS_FILE)
    if vec_ids.size != n_vectors:
        raise IntegrityError(
            f"id sidecar has {vec_ids.size} entries for {n_vectors} embeddings"
        )

    nlist = cfg.nlist or compute_nlist(n_vectors)
    if nlist > n_vectors:
        raise UsageError(f"nlist={nlist} exceeds vector count {n_vectors}")
    sample_size = compute_sample_size(nlist, n_vectors)
    rng = np.random.default_rng(cfg.seed)
    sample_rows = np.sort(rng.choice(n_vectors, size=sample_size, replace=False))
    trained = train_kmeans(mm[sample_rows], nlist, seed=cfg.seed)

    builder = IndexBuilder(
        index_dir, trained.centroids, seed=cfg.seed, training_sample_size=sample_size
    )
    for start in range(0, n_vectors, cfg.segment_size):
        stop = min(start + cfg.segment_size, n_vectors)
        builder.add_batch(mm[start:stop], vec_ids[start:stop])
    builder.merge(
        extra_manifest={
            "corpus_root": str(corpus_root),
            "embedder": {
                "kind": cfg.embedder.kind,
                "dim": cfg.embedder.dim,
                "max_tokens": cfg.embedder.max_tokens,
            },
            "dedup": cfg.dedup,
            "kmeans_objective": trained.objective,
            "metadata_schema_version": 1,
        }
    )
    index_time = time.monotonic() - t1

    store.verify_against_index(n_vectors)
    duplicates = store.count_rows() - store.count_indexed()
    store.close()
    checkpoint.clear()

    report = IndexReport(
        files_scanned=stats.original_files,
        files_cleaned=stats.cleaned_files,
        functions_parsed=stats.functions_parsed,
        parse_time=t_parse,
        embeddings=n_vectors,
        embed_time=t_embed,
        index_time=index_time,
        disk_bytes=_dir_bytes(index_dir),
        duplicates=duplicates,
        nlist=nlist,
        dim=cfg.embedder.dim,
    )
    payload = {"index": report.as_dict(), "parse": stats.as_report()}
    (index_dir / STATS_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return report


@dataclass
class QueryConfig:
    k: int = 100
    k_global: int | None = None  # None -> per-query mode
    threshold: float = 0.95
    nprobe: int | None = None  # None -> sqrt(nlist) heuristic
    skip_same_path: bool = False
    endpoint: str | None = None  # override to use the remote embedder


@dataclass
class QueryReport:
    queries: int
    search_time_s: float
    qps: float
    records: list[DisplayRecord]
    per_query: list[tuple[int, list[DisplayRecord]]] | None = None


class SearchSession:
    """An opened index plus its metadata store and a matching embedder.

    Safe for repeated queries; the FastAPI service keeps one per process.
    """

    def __init__(self, index_dir: Path, endpoint: str | None = None):
        index_dir = Path(index_dir)
        self.index_dir = index_dir
        self.index = IvfIndex.open(index_dir)
        self.store = MetadataStore(index_dir / METADATA_FILE)
        emb = self.index.manifest.extra.get("embedder", {})
        dim = emb.get("dim", self.index.manifest.dim)
        if dim != self.index.manifest.dim:
            raise UsageError(
                f"embedder dim {dim} does not match index dim {self.index.manifest.dim}"
            )
        kind = "remote" if endpoint else emb.get("kind", "local_hash")
        self.embedder_config = EmbedderConfig(
            kind=kind,
            dim=self.index.manifest.dim,
            max_tokens=emb.get("max_tokens", 128),
            endpoint=endpoint,
        )
        self.embedder = make_embedder(self.embedder_config)

    def close(self) -> None:
        self.index.close()
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def default_nprobe(self) -> int:
        return compute_nprobe(self.index.manifest.nlist)

    def search_embeddings(
        self, vectors: np.ndarray, cfg: QueryConfig
    ) -> tuple[list[QueryResult], float]:
        nprobe = cfg.nprobe or self.default_nprobe()
        params = SearchParams(k=cfg.k, nprobe=min(nprobe, self.index.manifest.nlist))
        results = []
        t0 = time.monotonic()
        for qid, vec in enumerate(vectors):
            raw = self.index.search(vec, params)
            results.append(hits_from_search(qid, raw))
        return results, time.monotonic() - t0

    def run(
        self,
        texts_or_fragments,
        locations: dict[int, Location],
        cfg: QueryConfig,
    ) -> QueryReport:
        if not texts_or_fragments:
            raise UsageError("no query fragments to search")
        if isinstance(texts_or_fragments[0], str):
            vectors = self.embedder.embed_texts(texts_or_fragments)
        else:
            vectors = self.embedder.embed_fragments(texts_or_fragments)
        results, search_time = self.search_embeddings(vectors, cfg)
        if cfg.skip_same_path:
            results = self._drop_same_path(results, locations)
        results = per_query_topk(results, cfg.threshold)

        if cfg.k_global is not None:
            ranked = global_topk(results, cfg.k_global).hits
            records = expand_duplicates(ranked, self.store, locations)
            per_query = None
        else:
            records = []
            per_query = []
            for r in results:
                recs = expand_duplicates(r.hits, self.store, locations)
                per_query.append((r.query_id, recs))
                records.extend(recs)
        qps = len(vectors) / search_time if search_time > 0 else float("inf")
        return QueryReport(
            queries=len(vectors),
            search_time_s=search_time,
            qps=qps,
            records=records,
            per_query=per_query,
        )

    def _drop_same_path(
        self, results: list[QueryResult], locations: dict[int, Location]
    ) -> list[QueryResult]:
        out = []
        for r in results:
            qpath = locations[r.query_id].path
            kept = [
                h for h in r.hits if self.store.get(h.corpus_id).file_path != qpath
            ]
            out.append(QueryResult(r.query_id, kept))
        return out


def load_query_fragments(query_root: Path, extensions=DEFAULT_EXTENSIONS):
    """Parse a query tree into fragments plus their location map."""
    stats = ScanStats()
    fragments = []
    for source in scan_corpus(Path(query_root), extensions, stats=stats):
        fragments.extend(parse_file(source, stats=stats))
    locations = {
        i: Location(str(f.file_path), f.start_line, f.end_line)
        for i, f in enumerate(fragments)
    }
    return fragments, locations, stats


def query_index(
    query_root: Path, index_dir: Path, cfg: QueryConfig
) -> QueryReport:
    fragments, locations, _ = load_query_fragments(query_root)
    fragments = [f for f in fragments if f.token_stream]
    if not fragments:
        raise UsageError(f"no parseable functions under {query_root}")
    with SearchSession(index_dir, endpoint=cfg.endpoint) as session:
        return session.run(fragments, locations, cfg)


def verify_index(index_dir: Path) -> dict:
    """Cross-check manifest, lists, dedup cache, metadata, and embeddings."""
    index_dir = Path(index_dir)
    problems: list[str] = []
    with IvfIndex.open(index_dir) as ix:
        manifest = ix.manifest
        list_ids = []
        for cluster in range(manifest.nlist):
            list_ids.append(ix._read_list(cluster)["id"])
        all_ids = np.concatenate(list_ids) if list_ids else np.empty(0, "<u8")
    if np.unique(all_ids).size != all_ids.size:
        problems.append("duplicate vector ids inside inverted lists")
    if all_ids.size != manifest.count:
        problems.append(
            f"lists hold {all_ids.size} vectors, manifest says {manifest.count}"
        )

    dim, emb_count = read_matrix_header(index_dir / MATRIX_FILE)
    if emb_count != manifest.count:
        problems.append(
            f"embedding matrix has {emb_count} rows, manifest says {manifest.count}"
        )
    if dim != manifest.dim:
        problems.append(f"embedding matrix dim {dim} != manifest dim {manifest.dim}")

    cache = DedupCache.load(index_dir / DEDUP_FILE)
    if len(cache) != manifest.count:
        problems.append(
            f"dedup cache has {len(cache)} fingerprints, manifest says {manifest.count}"
        )

    with MetadataStore(index_dir / METADATA_FILE) as store:
        indexed = store.count_indexed()
        if indexed != manifest.count:
            problems.append(
                f"metadata has {indexed} indexed rows, manifest says {manifest.count}"
            )
        ids_list = all_ids.tolist()
        found = set(store.have_ids(ids_list))
        missing = [i for i in ids_list if i not in found]
        if missing:
            problems.append(
                f"{len(missing)} vector ids lack metadata rows (first: {missing[:5]})"
            )
        total_rows = store.count_rows()

    if problems:
        raise IntegrityError("; ".join(problems))
    return {
        "vectors": int(manifest.count),
        "metadata_rows": int(total_rows),
        "indexed_rows": int(indexed),
        "dedup_entries": len(cache),
        "nlist": manifest.nlist,
        "dim": manifest.dim,
    }
