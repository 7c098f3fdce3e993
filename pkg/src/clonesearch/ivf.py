"""Disk-resident IVF-flat index.

Centroids stay in memory; full vectors live in per-cluster inverted lists
on disk. Batches are written as self-contained segments and merged into a
unified index with a streaming pass whose peak memory is one cluster run.
Searches read only the probed lists, and the reader counts every byte so
tests can assert the residency contract.

File formats (all integers little-endian, magic+version headers):
  index.manifest  JSON manifest
  centroids.f32   <4sIIQ>(IVFC, version, dim, nlist) + nlist*dim f32
  lists.bin       <4sIIQ>(IVFL, version, dim, count) + per-cluster runs of
                  (id u64, vec dim*f32) entries
  offsets.u64     <4sIIQ>(IVFO, version, 0, nlist) + (nlist+1) u64 byte
                  offsets into the lists.bin payload
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError, StorageError, UsageError
from .kmeans import ASSIGN_CHUNK, assign_clusters

FORMAT_VERSION = 1
METRIC_TAG = "L2-on-unit-vectors"

MANIFEST_NAME = "index.manifest"
CENTROIDS_NAME = "centroids.f32"
LISTS_NAME = "lists.bin"
OFFSETS_NAME = "offsets.u64"
SEGMENTS_DIR = "segments"

_HEADER = struct.Struct("<4sIIQ")
_MAGIC_CENTROIDS = b"IVFC"
_MAGIC_LISTS = b"IVFL"
_MAGIC_OFFSETS = b"IVFO"


# --- square-root sizing heuristics ------------------------------------------

def compute_nlist(n: int) -> int:
    """floor(8 * sqrt(N)) clusters, clamped to [1, N]."""
    if n < 1:
        raise UsageError("nothing to index: corpus has no vectors")
    return max(1, min(math.isqrt(64 * n), n))


def compute_sample_size(nlist: int, n: int) -> int:
    """39 training points per cluster, capped at the corpus size."""
    if nlist < 1:
        raise UsageError("nlist must be >= 1")
    return min(39 * nlist, n)


def compute_nprobe(nlist: int) -> int:
    """floor(sqrt(nlist)) probed clusters, at least 1."""
    if nlist < 1:
        raise UsageError("nlist must be >= 1")
    return max(1, math.isqrt(nlist))


# --- shared distance kernel ------------------------------------------------

def l2sq_rows(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise squared L2 distance, elementwise float32 path.

    Both the index scan and the brute-force oracle use this function so
    their distances agree bitwise and the shared tie rule is exact.
    """
    diff = rows.astype(np.float32, copy=False) - query.astype(np.float32, copy=False)
    return np.einsum("ij,ij->i", diff, diff)


def top_k_by_distance(ids: np.ndarray, d2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Select k entries ordered by (distance asc, id asc)."""
    order = np.lexsort((ids, d2))[:k]
    return ids[order], d2[order]


# --- on-disk primitives ----------------------------------------------------

def entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])


def _write_header(fh, magic: bytes, a: int, b: int) -> None:
    fh.write(_HEADER.pack(magic, FORMAT_VERSION, a, b))


def _read_header(path: Path, magic: bytes) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise IntegrityError(f"{path} is truncated")
    got_magic, version, a, b = _HEADER.unpack(head)
    if got_magic != magic:
        raise IntegrityError(f"{path} has bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path} has unsupported format version {version}")
    return a, b


def centroid_hash(centroids: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(centroids, dtype="<f4").tobytes())
    return h.hexdigest()


def write_centroids(path: Path, centroids: np.ndarray) -> None:
    arr = np.ascontiguousarray(centroids, dtype="<f4")
    with open(path, "wb") as fh:
        _write_header(fh, _MAGIC_CENTROIDS, arr.shape[1], arr.shape[0])
        fh.write(arr.tobytes())
        fh.flush()
        os.fsync(fh.fileno())


def read_centroids(path: Path) -> np.ndarray:
    dim, nlist = _read_header(path, _MAGIC_CENTROIDS)
    data = np.fromfile(path, dtype="<f4", offset=_HEADER.size)
    if data.size != dim * nlist:
        raise IntegrityError(f"{path}: payload does not match header counts")
    return data.reshape(nlist, dim)


def _write_offsets(path: Path, offsets: np.ndarray) -> None:
    arr = np.ascontiguousarray(offsets, dtype="<u8")
    with open(path, "wb") as fh:
        _write_header(fh, _MAGIC_OFFSETS, 0, arr.size - 1)
        fh.write(arr.tobytes())
        fh.flush()
        os.fsync(fh.fileno())


def _read_offsets(path: Path) -> np.ndarray:
    _, nlist = _read_header(path, _MAGIC_OFFSETS)
    data = np.fromfile(path, dtype="<u8", offset=_HEADER.size)
    if data.size != nlist + 1:
        raise IntegrityError(f"{path}: expected {nlist + 1} offsets, found {data.size}")
    return data


# --- segments ---------------------------------------------------------------

@dataclass
class SegmentInfo:
    name: str
    path: Path
    dim: int
    nlist: int
    count: int
    centroid_hash: str

    @classmethod
    def load(cls, path: Path) -> "SegmentInfo":
        meta = json.loads((path / "segment.json").read_text())
        return cls(
            name=path.name,
            path=path,
            dim=meta["dim"],
            nlist=meta["nlist"],
            count=meta["count"],
            centroid_hash=meta["centroid_hash"],
        )


def write_segment(
    seg_dir: Path,
    vectors: np.ndarray,
    ids: np.ndarray,
    centroids: np.ndarray,
    chash: str,
) -> SegmentInfo:
    """Assign each vector to its nearest centroid and write one segment.

    The segment directory appears atomically (tmp dir + rename), so a crash
    or full disk leaves no half-written segment behind.
    """
    nlist, dim = centroids.shape
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    if vectors.shape[0] != ids.shape[0]:
        raise UsageError(f"{vectors.shape[0]} vectors but {ids.shape[0]} ids")
    if vectors.shape[0] and vectors.shape[1] != dim:
        raise UsageError(f"vector dim {vectors.shape[1]} != index dim {dim}")
    if np.unique(ids).size != ids.size:
        raise UsageError("duplicate ids within batch")

    tmp_dir = seg_dir.parent / (".tmp_" + seg_dir.name)
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir(parents=True)
    try:
        labels = (
            assign_clusters(vectors, centroids, chunk=ASSIGN_CHUNK)
            if vectors.shape[0]
            else np.empty(0, dtype=np.int64)
        )
        edt = entry_dtype(dim)
        order = np.argsort(labels, kind="stable")  # stable keeps intra-batch order
        counts = np.bincount(labels, minlength=nlist)
        offsets = np.zeros(nlist + 1, dtype=np.uint64)
        np.cumsum(counts * edt.itemsize, out=offsets[1:])

        entries = np.empty(vectors.shape[0], dtype=edt)
        entries["id"] = ids[order]
        entries["vec"] = vectors[order]
        with open(tmp_dir / LISTS_NAME, "wb") as fh:
            _write_header(fh, _MAGIC_LISTS, dim, vectors.shape[0])
            fh.write(entries.tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        _write_offsets(tmp_dir / OFFSETS_NAME, offsets)
        meta = {
            "dim": dim,
            "nlist": nlist,
            "count": int(vectors.shape[0]),
            "centroid_hash": chash,
        }
        (tmp_dir / "segment.json").write_text(json.dumps(meta, indent=2))
        os.replace(tmp_dir, seg_dir)
    except OSError as exc:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise StorageError(f"cannot write segment {seg_dir}: {exc}") from exc
    return SegmentInfo(seg_dir.name, seg_dir, dim, nlist, int(vectors.shape[0]), chash)


def merge_segments(
    segments: list[SegmentInfo], lists_path: Path, offsets_path: Path
) -> dict:
    """Concatenate per-cluster runs in (segment order, intra-segment order).

    Streaming: holds at most one cluster run from one segment in memory.
    Returns accounting for the manifest and the residency checks.
    """
    if not segments:
        raise UsageError("no segments to merge")
    dim = segments[0].dim
    nlist = segments[0].nlist
    chash = segments[0].centroid_hash
    for seg in segments[1:]:
        if (seg.dim, seg.nlist) != (dim, nlist):
            raise IntegrityError(
                f"segment {seg.name} has shape {(seg.dim, seg.nlist)}, expected {(dim, nlist)}"
            )
        if seg.centroid_hash != chash:
            raise IntegrityError(
                f"segment {seg.name} was built against different centroids "
                f"({seg.centroid_hash} != {chash})"
            )

    seg_offsets = [_read_offsets(seg.path / OFFSETS_NAME) for seg in segments]
    handles = [open(seg.path / LISTS_NAME, "rb") for seg in segments]
    total = sum(seg.count for seg in segments)
    out_offsets = np.zeros(nlist + 1, dtype=np.uint64)
    peak_run_bytes = 0
    tmp_lists = lists_path.parent / (lists_path.name + ".tmp")
    try:
        with open(tmp_lists, "wb") as out:
            _write_header(out, _MAGIC_LISTS, dim, total)
            written = 0
            for cluster in range(nlist):
                for offs, fh in zip(seg_offsets, handles):
                    start = int(offs[cluster])
                    size = int(offs[cluster + 1]) - start
                    if size == 0:
                        continue
                    fh.seek(_HEADER.size + start)
                    run = fh.read(size)
                    if len(run) != size:
                        raise IntegrityError(f"{fh.name}: truncated cluster run {cluster}")
                    peak_run_bytes = max(peak_run_bytes, len(run))
                    out.write(run)
                    written += size
                out_offsets[cluster + 1] = written
            out.flush()
            os.fsync(out.fileno())
        os.replace(tmp_lists, lists_path)
        _write_offsets(offsets_path, out_offsets)
    except OSError as exc:
        tmp_lists.unlink(missing_ok=True)
        raise StorageError(f"cannot merge segments into {lists_path}: {exc}") from exc
    finally:
        for fh in handles:
            fh.close()
    return {
        "count": total,
        "peak_run_bytes": peak_run_bytes,
        "segments": [{"name": s.name, "count": s.count} for s in segments],
    }


# --- builder ----------------------------------------------------------------

class IndexBuilder:
    """Single-writer batch build: train first, then add_batch per segment,
    then merge() to produce the unified index and manifest."""

    def __init__(
        self,
        index_dir: Path,
        centroids: np.ndarray,
        seed: int,
        training_sample_size: int,
    ):
        self.index_dir = Path(index_dir)
        self.index_dir.mkdir(parents=True, exist_ok=True)
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.nlist, self.dim = self.centroids.shape
        self.seed = seed
        self.training_sample_size = training_sample_size
        self.chash = centroid_hash(self.centroids)
        self.segments: list[SegmentInfo] = []
        self.peak_batch_bytes = 0
        self.peak_run_bytes = 0
        self._seen_ids = np.empty(0, dtype=np.uint64)
        seg_root = self.index_dir / SEGMENTS_DIR
        if seg_root.exists():
            shutil.rmtree(seg_root)
        seg_root.mkdir()

    def add_batch(self, vectors: np.ndarray, ids: np.ndarray) -> SegmentInfo:
        ids = np.ascontiguousarray(ids, dtype=np.uint64)
        if self._seen_ids.size and ids.size:
            pos = np.searchsorted(self._seen_ids, ids)
            pos = np.minimum(pos, self._seen_ids.size - 1)
            if np.any(self._seen_ids[pos] == ids):
                raise UsageError("duplicate ids across batches")
        name = f"seg_{len(self.segments):05d}"
        info = write_segment(
            self.index_dir / SEGMENTS_DIR / name, vectors, ids, self.centroids, self.chash
        )
        self.segments.append(info)
        self._seen_ids = np.sort(np.concatenate([self._seen_ids, ids]))
        self.peak_batch_bytes = max(
            self.peak_batch_bytes, int(vectors.shape[0]) * (8 + 4 * self.dim)
        )
        return info

    def merge(self, extra_manifest: dict | None = None) -> "IndexManifest":
        report = merge_segments(
            self.segments, self.index_dir / LISTS_NAME, self.index_dir / OFFSETS_NAME
        )
        self.peak_run_bytes = report["peak_run_bytes"]
        write_centroids(self.index_dir / CENTROIDS_NAME, self.centroids)
        manifest = IndexManifest(
            dim=self.dim,
            nlist=self.nlist,
            metric=METRIC_TAG,
            count=report["count"],
            training_sample_size=self.training_sample_size,
            seed=self.seed,
            centroid_hash=self.chash,
            segments=report["segments"],
            extra=extra_manifest or {},
        )
        manifest.save(self.index_dir / MANIFEST_NAME)
        shutil.rmtree(self.index_dir / SEGMENTS_DIR, ignore_errors=True)
        return manifest


@dataclass
class IndexManifest:
    dim: int
    nlist: int
    metric: str
    count: int
    training_sample_size: int
    seed: int
    centroid_hash: str
    segments: list
    extra: dict
    format_version: int = FORMAT_VERSION

    def save(self, path: Path) -> None:
        payload = {
            "format_version": self.format_version,
            "dim": self.dim,
            "nlist": self.nlist,
            "metric": self.metric,
            "count": self.count,
            "training_sample_size": self.training_sample_size,
            "seed": self.seed,
            "centroid_hash": self.centroid_hash,
            "segments": self.segments,
            "extra": self.extra,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> "IndexManifest":
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise StorageError(f"no index manifest at {path}") from exc
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"corrupt index manifest {path}: {exc}") from exc
        if payload.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(
                f"manifest {path} has unsupported format version "
                f"{payload.get('format_version')}"
            )
        return cls(
            dim=payload["dim"],
            nlist=payload["nlist"],
            metric=payload["metric"],
            count=payload["count"],
            training_sample_size=payload["training_sample_size"],
            seed=payload["seed"],
            centroid_hash=payload["centroid_hash"],
            segments=payload["segments"],
            extra=payload.get("extra", {}),
        )


# --- search -----------------------------------------------------------------

@dataclass(frozen=True)
class SearchParams:
    k: int
    nprobe: int

    def validated(self, nlist: int) -> "SearchParams":
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if not 1 <= self.nprobe <= nlist:
            raise UsageError(f"nprobe must be in [1, {nlist}], got {self.nprobe}")
        return self


class IvfIndex:
    """Read-only view of a merged index.

    Holds centroids and the offsets table in memory; every list access goes
    through the counting reader so bytes_read reflects exactly what came off
    disk for the probed clusters.
    """

    def __init__(
        self,
        manifest: IndexManifest,
        centroids: np.ndarray,
        offsets: np.ndarray,
        lists_file,
        manifest_overhead_bytes: int,
    ):
        self.manifest = manifest
        self.centroids = centroids
        self._offsets = offsets
        self._lists = lists_file
        self._entry_dtype = entry_dtype(manifest.dim)
        self.manifest_overhead_bytes = manifest_overhead_bytes
        self._bytes_read = 0
        self._open = True

    @classmethod
    def open(cls, index_dir: Path) -> "IvfIndex":
        index_dir = Path(index_dir)
        manifest = IndexManifest.load(index_dir / MANIFEST_NAME)
        centroids = read_centroids(index_dir / CENTROIDS_NAME)
        if centroid_hash(centroids) != manifest.centroid_hash:
            raise IntegrityError(f"{index_dir}: centroids do not match manifest hash")
        if centroids.shape != (manifest.nlist, manifest.dim):
            raise IntegrityError(f"{index_dir}: centroid table shape mismatch")
        offsets = _read_offsets(index_dir / OFFSETS_NAME)
        if offsets.size != manifest.nlist + 1:
            raise IntegrityError(f"{index_dir}: offsets table length mismatch")
        dim, count = _read_header(index_dir / LISTS_NAME, _MAGIC_LISTS)
        if dim != manifest.dim or count != manifest.count:
            raise IntegrityError(f"{index_dir}: lists header disagrees with manifest")
        expected_payload = count * entry_dtype(dim).itemsize
        if int(offsets[-1]) != expected_payload:
            raise IntegrityError(f"{index_dir}: offsets do not cover the lists payload")
        lists_file = open(index_dir / LISTS_NAME, "rb")
        overhead = (
            (index_dir / MANIFEST_NAME).stat().st_size
            + (index_dir / CENTROIDS_NAME).stat().st_size
            + (index_dir / OFFSETS_NAME).stat().st_size
            + _HEADER.size
        )
        return cls(manifest, centroids, offsets, lists_file, overhead)

    def close(self) -> None:
        if self._open:
            self._lists.close()
            self._open = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def bytes_read(self) -> int:
        return self._bytes_read

    def reset_io_counter(self) -> None:
        self._bytes_read = 0

    def probed_list_bytes(self, query: np.ndarray, nprobe: int) -> int:
        """Total on-disk size of the lists a search with nprobe would touch."""
        probes = self._probe_order(query)[:nprobe]
        return int(
            sum(int(self._offsets[c + 1]) - int(self._offsets[c]) for c in probes)
        )

    def _probe_order(self, query: np.ndarray) -> np.ndarray:
        d2 = l2sq_rows(self.centroids, query)
        return np.lexsort((np.arange(d2.size), d2))

    def _read_list(self, cluster: int) -> np.ndarray:
        start = int(self._offsets[cluster])
        size = int(self._offsets[cluster + 1]) - start
        if size == 0:
            return np.empty(0, dtype=self._entry_dtype)
        self._lists.seek(_HEADER.size + start)
        raw = self._lists.read(size)
        if len(raw) != size:
            raise IntegrityError(f"lists file truncated at cluster {cluster}")
        self._bytes_read += size
        return np.frombuffer(raw, dtype=self._entry_dtype)

    def search(self, query: np.ndarray, params: SearchParams) -> list[tuple[int, float]]:
        """Top-k (id, l2 distance) over the nprobe nearest clusters,
        ascending distance, distance ties broken by ascending id."""
        if not self._open:
            raise StorageError("index is closed; reopen it before searching")
        params = params.validated(self.manifest.nlist)
        query = np.ascontiguousarray(query, dtype=np.float32)
        if query.shape != (self.manifest.dim,):
            raise UsageError(
                f"query dim {query.shape} does not match index dim {self.manifest.dim}"
            )
        probes = self._probe_order(query)[: params.nprobe]
        id_chunks = []
        d2_chunks = []
        for cluster in probes:
            entries = self._read_list(int(cluster))
            if entries.size == 0:
                continue
            id_chunks.append(entries["id"].astype(np.uint64))
            d2_chunks.append(l2sq_rows(entries["vec"], query))
        if not id_chunks:
            return []
        ids = np.concatenate(id_chunks)
        d2 = np.concatenate(d2_chunks)
        top_ids, top_d2 = top_k_by_distance(ids, d2, params.k)
        dists = np.sqrt(top_d2.astype(np.float64))
        return [(int(i), float(d)) for i, d in zip(top_ids, dists)]
