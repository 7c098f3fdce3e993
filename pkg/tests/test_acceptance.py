"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline.
Large fixtures (the 20k corpus and the 1M-vector build) are module-scoped;
the 1M residency test (C4) must run before the single-batch comparison
build (C5), which is why the tests keep their numeric order.
"""

import json
import resource
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from clonesearch.dedup import DedupCache, fingerprint
from clonesearch.embedding import (
    EmbedderConfig,
    MatrixWriter,
    open_matrix,
    read_matrix_row_set,
    read_matrix_rows,
)
from clonesearch.ivf import (
    IndexBuilder,
    IvfIndex,
    SearchParams,
    compute_nlist,
    compute_nprobe,
    compute_sample_size,
    l2sq_rows,
)
from clonesearch.kmeans import train_kmeans
from clonesearch.oracle import brute_force_search, brute_force_topk_ids, recall_at_k
from clonesearch.parser import parse_source, tokenize
from clonesearch.pipeline import IndexConfig, QueryConfig, index_corpus, query_index
from clonesearch.results import (
    QueryResult,
    ScoredHit,
    global_topk,
    recall_precision_curve,
    write_curve_csv,
)

ENTRY_BYTES_D64 = 8 + 4 * 64


@contextmanager
def report(name: str):
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {name}: FAIL", flush=True)
        raise
    print(f"ACCEPTANCE {name}: PASS", flush=True)


def unit_rows(n, dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(size=(n, dim), dtype=np.float32)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def mixture(n, modes, dim, seed, spread):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(modes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    pick = rng.integers(modes, size=n)
    pts = centers[pick] + spread * rng.normal(size=(n, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts.astype(np.float32)


def exhaustive_results(index, queries, k):
    params = SearchParams(k=k, nprobe=index.manifest.nlist)
    return [index.search(q, params) for q in queries]


# --- C2/C6 fixture: 20k unit vectors, nlist=128 ------------------------------

@pytest.fixture(scope="module")
def fixture20k(tmp_path_factory):
    root = tmp_path_factory.mktemp("fix20k")
    vectors = unit_rows(20_000, 64, seed=101)
    queries = unit_rows(500, 64, seed=102)
    nlist = 128
    sample_size = compute_sample_size(nlist, len(vectors))
    rng = np.random.default_rng(5)
    sample = vectors[np.sort(rng.choice(len(vectors), size=sample_size, replace=False))]
    trained = train_kmeans(sample, nlist, seed=5)
    builder = IndexBuilder(root, trained.centroids, seed=5, training_sample_size=sample_size)
    builder.add_batch(vectors, np.arange(len(vectors), dtype=np.uint64))
    builder.merge()
    return {"dir": root, "vectors": vectors, "queries": queries, "results": {}}


# --- C4/C5 fixture: 1M vectors on disk, nlist=256 ----------------------------

@pytest.fixture(scope="module")
def fixture1m(tmp_path_factory):
    root = tmp_path_factory.mktemp("fix1m")
    n, dim, nlist, seg = 1_000_000, 64, 256, 100_000

    rss_before = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss

    # stream the corpus to disk in segment-sized slabs; nothing holds it whole
    matrix_path = root / "corpus.dbse"
    rng = np.random.default_rng(909)
    with MatrixWriter(matrix_path, dim) as w:
        for _ in range(n // seg):
            block = rng.standard_normal(size=(seg, dim), dtype=np.float32)
            block /= np.linalg.norm(block, axis=1, keepdims=True)
            w.append(block)

    sample_size = compute_sample_size(nlist, n)
    srng = np.random.default_rng(13)
    sample_rows = np.sort(srng.choice(n, size=sample_size, replace=False))
    sample = read_matrix_row_set(matrix_path, sample_rows)
    trained = train_kmeans(sample, nlist, seed=13)

    builder = IndexBuilder(
        root / "ix10", trained.centroids, seed=13, training_sample_size=sample_size
    )
    ids = np.arange(n, dtype=np.uint64)
    for start in range(0, n, seg):
        builder.add_batch(
            read_matrix_rows(matrix_path, start, seg), ids[start : start + seg]
        )
    builder.merge()

    rss_after = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return {
        "root": root,
        "matrix_path": matrix_path,
        "centroids": trained.centroids,
        "sample_size": sample_size,
        "builder": builder,
        "n": n,
        "seg": seg,
        "rss_delta_kib": rss_after - rss_before,
        "queries": unit_rows(100, dim, seed=910),
    }


class TestAcceptance:
    def test_c01_heuristic_constants(self):
        with report("C1 heuristic-constants"):
            assert compute_nlist(18_173_452) == 34_104
            assert compute_sample_size(34_104, 18_173_452) == 1_330_056
            assert compute_nprobe(34_104) == 184

    def test_c02_exhaustive_equivalence(self, fixture20k):
        with report("C2 exhaustive-equivalence"):
            with IvfIndex.open(fixture20k["dir"]) as ix:
                got = exhaustive_results(ix, fixture20k["queries"], k=10)
            want = [
                brute_force_search(fixture20k["vectors"], q, k=10)
                for q in fixture20k["queries"]
            ]
            assert got == want  # ids, order, and distances all identical
            fixture20k["results"]["first_run"] = got

    def test_c03_heuristic_recall(self, tmp_path):
        with report("C3 heuristic-recall"):
            corpus = mixture(10_000, 64, 64, seed=2024, spread=0.03)
            queries = mixture(500, 64, 64, seed=2025, spread=0.03)
            nlist = 800
            sample_size = compute_sample_size(nlist, len(corpus))  # clamped to 10k
            rng = np.random.default_rng(7)
            rows = np.sort(rng.choice(len(corpus), size=sample_size, replace=False))
            trained = train_kmeans(corpus[rows], nlist, seed=7)
            builder = IndexBuilder(
                tmp_path, trained.centroids, seed=7, training_sample_size=sample_size
            )
            builder.add_batch(corpus, np.arange(len(corpus), dtype=np.uint64))
            builder.merge()

            exact = brute_force_topk_ids(corpus, queries, 10)
            recalls = {}
            with IvfIndex.open(tmp_path) as ix:
                for nprobe in (1, 8, 28, 100, 800):
                    approx = [
                        [i for i, _ in ix.search(q, SearchParams(10, nprobe))]
                        for q in queries
                    ]
                    recalls[nprobe] = recall_at_k(approx, exact, 10).recall_at_k
            assert recalls[28] >= 0.95  # pinned fixture measured 0.9838
            values = [recalls[p] for p in (1, 8, 28, 100, 800)]
            assert values == sorted(values)
            assert recalls[800] == 1.0

    def test_c04_residency_and_io_bound(self, fixture1m):
        with report("C4 residency-io-bound"):
            builder = fixture1m["builder"]
            n, seg = fixture1m["n"], fixture1m["seg"]
            whole_index_bytes = n * ENTRY_BYTES_D64

            # build never buffered more than one batch plus one cluster run
            assert builder.peak_batch_bytes == seg * ENTRY_BYTES_D64
            assert builder.peak_batch_bytes + builder.peak_run_bytes < whole_index_bytes // 4
            # process-level guard: far below any whole-index (256 MiB) load
            assert fixture1m["rss_delta_kib"] < 300 * 1024

            with IvfIndex.open(fixture1m["root"] / "ix10") as ix:
                assert ix.manifest.count == n
                # per-query bytes == the probed runs, nothing else
                for q in fixture1m["queries"][:10]:
                    for nprobe in (1, 16):
                        expected = ix.probed_list_bytes(q, nprobe)
                        ix.reset_io_counter()
                        ix.search(q, SearchParams(k=10, nprobe=nprobe))
                        assert ix.bytes_read <= expected + 0  # manifest read at open
                        assert ix.bytes_read == expected
                # search correctness after the batched build
                mm = open_matrix(fixture1m["matrix_path"])
                for q in fixture1m["queries"][:5]:
                    got = ix.search(q, SearchParams(k=10, nprobe=ix.manifest.nlist))
                    assert got == brute_force_search(mm, q, k=10)

    def test_c05_merge_equivalence(self, fixture1m):
        with report("C5 merge-equivalence"):
            mm = open_matrix(fixture1m["matrix_path"])
            n = fixture1m["n"]
            single = IndexBuilder(
                fixture1m["root"] / "ix1",
                fixture1m["centroids"],
                seed=13,
                training_sample_size=fixture1m["sample_size"],
            )
            single.add_batch(mm[:], np.arange(n, dtype=np.uint64))
            single.merge()

            params = SearchParams(k=10, nprobe=16)
            with IvfIndex.open(fixture1m["root"] / "ix10") as a, IvfIndex.open(
                fixture1m["root"] / "ix1"
            ) as b:
                for q in fixture1m["queries"]:
                    assert a.search(q, params) == b.search(q, params)

    def test_c06_persistence(self, fixture20k):
        with report("C6 persistence"):
            first = fixture20k["results"].get("first_run")
            if first is None:  # allow running this test in isolation
                with IvfIndex.open(fixture20k["dir"]) as ix:
                    first = exhaustive_results(ix, fixture20k["queries"], k=10)
            with IvfIndex.open(fixture20k["dir"]) as reopened:
                again = exhaustive_results(reopened, fixture20k["queries"], k=10)
            assert again == first

    def test_c07_dedup_pipeline(self, tmp_path):
        with report("C7 dedup-pipeline"):
            corpus = tmp_path / "corpus"
            corpus.mkdir()
            base_fn = (
                "int checksum(const char *buf, int n)\n"
                "{\n"
                "    int acc = 0;\n"
                "    for (int i = 0; i < n; i++) {\n"
                "        acc = acc * 31 + buf[i];\n"
                "    }\n"
                "    return acc;\n"
                "}\n"
            )
            # 100 files x 10 whitespace variants = 1000 Type-1 copies
            for i in range(100):
                chunks = []
                for j in range(10):
                    pad = " " * (j + 1)
                    chunks.append(base_fn.replace("    ", pad))
                (corpus / f"dup_{i:03d}.c").write_text("\n".join(chunks))
            variants = [
                base_fn.replace("acc", "total"),
                base_fn.replace("31", "37"),
                base_fn.replace("buf", "data"),
            ]
            (corpus / "variants.c").write_text("\n".join(variants))
            fillers = [
                f"int filler_{i}(int a_{i}, int b_{i})\n{{\n    return a_{i} % (b_{i} + {i + 2});\n}}\n"
                for i in range(20)
            ]
            (corpus / "fillers.c").write_text("\n".join(fillers))

            cfg = IndexConfig(embedder=EmbedderConfig(dim=768), nlist=8, seed=3)
            rep = index_corpus(corpus, tmp_path / "ix", cfg)
            assert rep.functions_parsed == 1023
            assert rep.embeddings == 24  # 1 class representative + 3 variants + 20 fillers
            assert rep.duplicates == 999

            from clonesearch.metadata import MetadataStore

            with MetadataStore(tmp_path / "ix" / "metadata.sqlite") as store:
                class_rows = store.duplicates_of(0)
                assert len(class_rows) == 1000
                assert sum(m.indexed for m in class_rows) == 1

            qdir = tmp_path / "query"
            qdir.mkdir()
            (qdir / "probe.c").write_text(base_fn)
            qr = query_index(
                qdir, tmp_path / "ix", QueryConfig(k=5, nprobe=8, threshold=0.0)
            )
            top5 = qr.records[:5]
            assert top5[0].score == 1.0
            assert len(top5[0].duplicate_locations) == 1000
            # the whole class occupies exactly one ranked entry
            class_entries = [r for r in top5 if len(r.duplicate_locations) == 1000]
            assert len(class_entries) == 1
            variant_entries = [
                r for r in top5 if r.corpus.path.endswith("variants.c")
            ]
            assert len(variant_entries) == 3  # all three near-variants in top-5

            # with dedup off the giant clone class floods every top-5 slot
            cfg_off = IndexConfig(
                embedder=EmbedderConfig(dim=768), nlist=8, seed=3, dedup=False
            )
            index_corpus(corpus, tmp_path / "ix_off", cfg_off)
            qr_off = query_index(
                qdir, tmp_path / "ix_off", QueryConfig(k=5, nprobe=8, threshold=0.0)
            )
            top5_off = qr_off.records[:5]
            assert all(r.score == 1.0 for r in top5_off)
            assert all(r.corpus.path.endswith(".c") and "dup_" in r.corpus.path
                       for r in top5_off)

    def test_c08_global_topk_oracle_and_curve(self, tmp_path):
        with report("C8 global-topk-oracle"):
            import random

            rng = random.Random(4242)
            for _ in range(200):
                m = rng.randint(1, 50)
                k = rng.randint(1, 100)
                batch = []
                for q in range(m):
                    hits = sorted(
                        (
                            ScoredHit(q, rng.randint(0, 400), round(rng.uniform(-1, 1), 3))
                            for _ in range(rng.randint(0, k))
                        ),
                        key=lambda h: -h.score,
                    )
                    batch.append(QueryResult(q, hits))
                k_global = rng.randint(1, m * k)
                union = sorted(
                    (h for r in batch for h in r.hits),
                    key=lambda h: (-h.score, h.query_id, h.corpus_id),
                )
                assert global_topk(batch, k_global).hits == union[:k_global]

            # labeled synthetic benchmark: 30 true pairs planted on top
            batch, labels = [], set()
            hid = 0
            m, k = 20, 10
            for q in range(m):
                hits = []
                for _ in range(k):
                    true = hid < 30
                    s = 0.99 - hid * 0.001 if true else 0.5 - hid * 0.0001
                    hits.append(ScoredHit(q, hid, s))
                    if true:
                        labels.add((q, hid))
                    hid += 1
                batch.append(QueryResult(q, sorted(hits, key=lambda h: -h.score)))
            sweep = [1, 5, 10, 20, 50, 100, m * k]
            points = recall_precision_curve(batch, labels, sweep=sweep)
            recalls = [p.recall for p in points]
            assert recalls == sorted(recalls)

            csv_path = tmp_path / "curve.csv"
            write_curve_csv(points, csv_path)
            rows = {
                int(r.split(",")[0]): (float(r.split(",")[1]), float(r.split(",")[2]))
                for r in csv_path.read_text().splitlines()[1:]
            }
            assert rows[10][1] > rows[m * k][1]  # early precision strictly higher

    def test_c09_metric_bridge(self):
        with report("C9 metric-bridge"):
            u = unit_rows(10_000, 768, seed=31)
            v = unit_rows(10_000, 768, seed=32)
            d2 = np.array([l2sq_rows(v[i][None, :], u[i])[0] for i in range(len(u))])
            cos = np.einsum(
                "ij,ij->i", u.astype(np.float64), v.astype(np.float64)
            )
            assert np.max(np.abs((1.0 - d2 / 2.0) - cos)) <= 1e-5

    def test_c10_parser_fixtures(self):
        with report("C10 parser-fixtures"):
            data = Path(__file__).parent / "data" / "c_suite"
            expected = json.loads((data / "expected.json").read_text())
            assert len(expected) == 20
            for name, want in expected.items():
                result = parse_source((data / name).read_text(), data / name)
                got = [[f.start_line, f.end_line] for f in result.fragments]
                assert got == want["fragments"], name
                assert result.partially_parsed == want["partial"], name
