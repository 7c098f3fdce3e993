"""Operator CLI: index, query, eval, verify, stats, serve.

Configuration precedence is flags > config file > defaults. The config file
is plain ``key = value`` lines (# comments allowed); keys match the long
flag names with dashes or underscores. The embedding service endpoint can
also come from $CLONESEARCH_EMBED_ENDPOINT.

Exit codes: 0 ok, 2 usage, 3 data integrity, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .embedding import EmbedderConfig, open_matrix, read_ids, read_matrix_header
from .errors import CloneSearchError, UsageError
from .ivf import IvfIndex, MANIFEST_NAME, SearchParams, compute_nprobe
from .oracle import brute_force_topk_ids, recall_at_k
from .parser import format_report_text
from .pipeline import (
    IndexConfig,
    MATRIX_FILE,
    IDS_FILE,
    QueryConfig,
    STATS_FILE,
    index_corpus,
    query_index,
    verify_index,
)
from .results import (
    CurvePoint,
    QueryResult,
    ScoredHit,
    format_table,
    recall_precision_curve,
    score,
    write_curve_csv,
)

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "CLONESEARCH_EMBED_ENDPOINT"

CONFIG_KEYS = {
    "dim",
    "max_tokens",
    "nlist",
    "nprobe",
    "segment_size",
    "k",
    "k_global",
    "threshold",
    "seed",
    "endpoint",
    "extensions",
}


def load_config_file(path: Path) -> dict:
    """Parse ``key = value`` lines; unknown keys are a usage error."""
    values: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{ln}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def _setting(args, config: dict, name: str, default, cast):
    """flags > config file > default."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in config:
        try:
            return cast(config[name])
        except ValueError as exc:
            raise UsageError(f"config key {name}: {exc}") from exc
    return default


def _print_kv(pairs: dict) -> None:
    for key in sorted(pairs):
        print(f"{key}={pairs[key]}")


def _embedder_from(args, config) -> EmbedderConfig:
    endpoint = _setting(args, config, "endpoint", os.environ.get(ENDPOINT_ENV), str)
    return EmbedderConfig(
        kind="remote" if endpoint else "local_hash",
        dim=_setting(args, config, "dim", 768, int),
        max_tokens=_setting(args, config, "max_tokens", 128, int),
        endpoint=endpoint,
    )


def cmd_index(args) -> int:
    config = load_config_file(args.config) if args.config else {}
    cfg = IndexConfig(
        embedder=_embedder_from(args, config),
        extensions=frozenset(
            _setting(args, config, "extensions", ".c,.h", str).split(",")
        ),
        nlist=_setting(args, config, "nlist", None, int),
        segment_size=_setting(args, config, "segment_size", 100_000, int),
        seed=_setting(args, config, "seed", 42, int),
        dedup=not args.no_dedup,
        force=args.force,
        resume=args.resume,
        threads=args.threads,
    )
    report = index_corpus(args.corpus_root, args.index_dir, cfg)
    stats_payload = json.loads((Path(args.index_dir) / STATS_FILE).read_text())
    print(format_report_text(stats_payload["parse"]), file=sys.stderr)
    _print_kv(report.as_dict())
    return 0


def cmd_query(args) -> int:
    config = load_config_file(args.config) if args.config else {}
    k_global = _setting(args, config, "k_global", None, int)
    if args.global_topk is not None:
        k_global = args.global_topk
    cfg = QueryConfig(
        k=_setting(args, config, "k", 100, int),
        k_global=k_global,
        threshold=_setting(args, config, "threshold", 0.95, float),
        nprobe=_setting(args, config, "nprobe", None, int),
        skip_same_path=args.skip_same_path,
        endpoint=_setting(args, config, "endpoint", os.environ.get(ENDPOINT_ENV), str),
    )
    if args.server:
        return _query_via_server(args, cfg)
    report = query_index(args.query_root, args.index_dir, cfg)
    _emit_records(args, report.records, report.per_query)
    print(
        f"# queries={report.queries} search_time_s={report.search_time_s:.4f} "
        f"qps={report.qps:.1f}",
        file=sys.stderr,
    )
    return 0


def _emit_records(args, records, per_query) -> None:
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        if args.format == "jsonl":
            for rec in records:
                print(rec.to_json(), file=out)
        elif per_query is not None:
            for qid, recs in per_query:
                print(f"== query {qid}", file=out)
                print(format_table(recs), file=out)
        else:
            print(format_table(records), file=out)
    finally:
        if args.output:
            out.close()


def _query_via_server(args, cfg: QueryConfig) -> int:
    """Thin-client mode: parse locally, let the service embed and search."""
    import httpx

    from .pipeline import load_query_fragments

    fragments, locations, _ = load_query_fragments(args.query_root)
    fragments = [f for f in fragments if f.token_stream]
    if not fragments:
        raise UsageError(f"no parseable functions under {args.query_root}")
    payload = {
        "texts": [f.text for f in fragments],
        "k": cfg.k,
        "k_global": cfg.k_global,
        "threshold": cfg.threshold,
        "nprobe": cfg.nprobe,
    }
    resp = httpx.post(args.server.rstrip("/") + "/search", json=payload, timeout=300.0)
    if resp.status_code != 200:
        raise CloneSearchError(f"server returned {resp.status_code}: {resp.text[:300]}")
    body = resp.json()
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for hit in body["hits"]:
            qloc = locations[hit["query_index"]]
            hit["query"] = {
                "path": qloc.path,
                "start_line": qloc.start_line,
                "end_line": qloc.end_line,
            }
            print(json.dumps(hit, sort_keys=True), file=out)
    finally:
        if args.output:
            out.close()
    print(f"# queries={body['queries']} qps={body['qps']:.1f}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    index_dir = Path(args.index_dir)
    matrix_path = index_dir / MATRIX_FILE
    if not matrix_path.exists():
        raise UsageError(
            f"missing oracle data: {matrix_path} (build the index with this tool)"
        )
    matrix = open_matrix(matrix_path)
    ids = read_ids(index_dir / IDS_FILE)

    rng = np.random.default_rng(args.seed)
    if args.queries:
        dim, _ = read_matrix_header(args.queries)
        queries = np.array(open_matrix(args.queries))
    else:
        rows = rng.choice(matrix.shape[0], size=min(args.n_queries, matrix.shape[0]),
                          replace=False)
        queries = np.array(matrix[np.sort(rows)])

    k = args.k
    exact = brute_force_topk_ids(matrix, queries, k, ids=ids)

    with IvfIndex.open(index_dir) as ix:
        nlist = ix.manifest.nlist
        sweep = (
            [int(s) for s in args.nprobe_sweep.split(",")]
            if args.nprobe_sweep
            else sorted({1, compute_nprobe(nlist), max(1, nlist // 4), nlist})
        )
        print(f"{'nprobe':>8} {'recall@' + str(k):>12} {'qps':>10}")
        rows = []
        for nprobe in sweep:
            t0 = time.monotonic()
            approx = [
                [i for i, _ in ix.search(q, SearchParams(k=k, nprobe=nprobe))]
                for q in queries
            ]
            dt = time.monotonic() - t0
            report = recall_at_k(approx, exact, k)
            qps = len(queries) / dt if dt > 0 else float("inf")
            rows.append((nprobe, report.recall_at_k, qps))
            print(f"{nprobe:>8} {report.recall_at_k:>12.4f} {qps:>10.1f}")

        if args.labels:
            points = _labeled_curve(ix, queries, k, args)
            out = Path(args.curve_out or (index_dir / "curve.csv"))
            write_curve_csv(points, out)
            print(f"# wrote recall/precision curve to {out}", file=sys.stderr)
    return 0


def _labeled_curve(ix, queries, k, args) -> list[CurvePoint]:
    labels = set()
    for line in Path(args.labels).read_text().splitlines()[1:]:
        if line.strip():
            q, c = line.split(",")[:2]
            labels.add((int(q), int(c)))
    nprobe = compute_nprobe(ix.manifest.nlist)
    batch = []
    for qid, q in enumerate(queries):
        raw = ix.search(q, SearchParams(k=k, nprobe=nprobe))
        batch.append(
            QueryResult(qid, [ScoredHit(qid, cid, score(d)) for cid, d in raw])
        )
    sweep = sorted({1, 5, 10, 20, 50, 100, len(queries) * k})
    return recall_precision_curve(batch, labels, sweep=sweep)


def cmd_verify(args) -> int:
    summary = verify_index(args.index_dir)
    _print_kv(summary)
    print("ok")
    return 0


def cmd_stats(args) -> int:
    index_dir = Path(args.index_dir)
    stats_path = index_dir / STATS_FILE
    if not stats_path.exists():
        raise UsageError(f"no stats recorded at {stats_path}")
    payload = json.loads(stats_path.read_text())
    flat = {}
    for section, body in sorted(payload.items()):
        for key, value in body.items():
            flat[f"{section}.{key}"] = value
    manifest_path = index_dir / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for key in ("count", "dim", "nlist", "training_sample_size"):
            flat[f"index.{key}"] = manifest[key]
    _print_kv(flat)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.index_dir, endpoint=args.endpoint or os.environ.get(ENDPOINT_ENV))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clonesearch",
        description="Function-level code clone search over a disk-resident vector index",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build an index from a corpus tree")
    p.add_argument("corpus_root", type=Path)
    p.add_argument("index_dir", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--dim", type=int)
    p.add_argument("--max-tokens", type=int, dest="max_tokens")
    p.add_argument("--nlist", type=int)
    p.add_argument("--segment-size", type=int, dest="segment_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--extensions", type=str)
    p.add_argument("--endpoint", type=str, help="remote embedding service URL")
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="parse worker pool size")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="search a query tree against an index")
    p.add_argument("query_root", type=Path)
    p.add_argument("index_dir", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--global-topk", type=int, dest="global_topk")
    p.add_argument("--threshold", type=float)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--endpoint", type=str)
    p.add_argument("--skip-same-path", action="store_true")
    p.add_argument("--format", choices=("table", "jsonl"), default="jsonl")
    p.add_argument("--output", type=Path)
    p.add_argument("--server", type=str, help="query a running clonesearch service")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="recall/QPS sweep against the exact oracle")
    p.add_argument("index_dir", type=Path)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--n-queries", type=int, default=100, dest="n_queries")
    p.add_argument("--queries", type=Path, help="matrix file of query embeddings")
    p.add_argument("--nprobe-sweep", type=str, dest="nprobe_sweep")
    p.add_argument("--labels", type=Path, help="CSV of true (query_id, corpus_id) pairs")
    p.add_argument("--curve-out", type=Path, dest="curve_out")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="cross-check index, cache, and metadata")
    p.add_argument("index_dir", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="print indexing statistics")
    p.add_argument("index_dir", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the search service")
    p.add_argument("index_dir", type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--endpoint", type=str)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CloneSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
