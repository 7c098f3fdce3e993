"""Fragment embedders and the on-disk embedding matrix format.

Two embedder kinds share one contract: fixed dimension, unit L2 norm,
deterministic, order-preserving, and only the first ``max_tokens`` tokens
influence the result. ``local_hash`` is a hashed bag of token n-grams used
for tests and offline runs; ``remote`` talks to the neural embedding
service over HTTP.

Vectors are normalized at ingestion so squared L2 distance and cosine
similarity stay monotonically related (d^2 = 2 - 2*cos).
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmbedServiceError, IntegrityError, StorageError, UsageError
from .parser import CodeFragment

logger = logging.getLogger(__name__)

DEFAULT_DIM = 768
DEFAULT_MAX_TOKENS = 128

UNIT_NORM_TOL = 1e-5

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193
_MASK32 = 0xFFFFFFFF

MATRIX_MAGIC = b"DBSE"
_MATRIX_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count
MATRIX_VERSION = 1


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "local_hash"  # local_hash | remote
    dim: int = DEFAULT_DIM
    max_tokens: int = DEFAULT_MAX_TOKENS
    endpoint: str | None = None
    batch_size: int = 32
    inflight: int = 2

    def __post_init__(self):
        if self.kind not in ("local_hash", "remote"):
            raise UsageError(f"unknown embedder kind: {self.kind}")
        if self.dim < 8:
            raise UsageError("embedding dim must be >= 8")
        if self.max_tokens < 1:
            raise UsageError("max_tokens must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise UsageError("remote embedder requires an endpoint")


def _fnv1a32(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK32
    return h


def local_hash_embed(tokens: Sequence[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed-hash bag of token 1- and 2-grams, folded into ``dim`` buckets.

    Shared n-grams raise cosine similarity; the FNV-1a/32 hash keeps the
    mapping reproducible across processes and languages.
    """
    if not tokens:
        raise ValueError("cannot embed an empty token stream")
    vec = np.zeros(dim, dtype=np.float64)
    grams = list(tokens)
    grams.extend(f"{a}\x1f{b}" for a, b in zip(tokens, tokens[1:]))
    for gram in grams:
        h = _fnv1a32(gram.encode("utf-8"))
        sign = 1.0 if (h & 0x80000000) == 0 else -1.0
        vec[h % dim] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # all buckets cancelled; park a deterministic unit spike instead
        vec[_fnv1a32("\x1f".join(tokens).encode("utf-8")) % dim] = 1.0
        norm = 1.0
    return (vec / norm).astype(np.float32)


class LocalHashEmbedder:
    def __init__(self, cfg: EmbedderConfig):
        self.cfg = cfg

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def embed_fragments(self, fragments: Sequence[CodeFragment]) -> np.ndarray:
        out = np.empty((len(fragments), self.cfg.dim), dtype=np.float32)
        for i, frag in enumerate(fragments):
            out[i] = local_hash_embed(
                frag.token_stream[: self.cfg.max_tokens], self.cfg.dim
            )
        return out

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        from .parser import tokenize

        out = np.empty((len(texts), self.cfg.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            toks = tokenize(text)
            if not toks:
                raise UsageError(f"text {i} has no tokens to embed")
            out[i] = local_hash_embed(toks[: self.cfg.max_tokens], self.cfg.dim)
        return out


class RemoteEmbedder:
    """HTTP client for the embedding service (POST /embed).

    Requests carry at most ``batch_size`` texts; up to ``inflight`` requests
    run concurrently while output order stays aligned with the input.
    Failures surface as EmbedServiceError with the count of fragments
    already embedded, so an indexing checkpoint can resume.
    """

    RETRIES = 4
    BACKOFF_S = 0.25

    def __init__(self, cfg: EmbedderConfig, client=None):
        import httpx

        self.cfg = cfg
        self._client = client or httpx.Client(timeout=60.0)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def embed_fragments(self, fragments: Sequence[CodeFragment]) -> np.ndarray:
        return self.embed_texts([f.text for f in fragments])

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.cfg.dim), dtype=np.float32)
        chunks = [
            (start, texts[start : start + self.cfg.batch_size])
            for start in range(0, len(texts), self.cfg.batch_size)
        ]
        if self.cfg.inflight > 1 and len(chunks) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=self.cfg.inflight) as pool:
                for (start, chunk), vecs in zip(
                    chunks, pool.map(lambda c: self._post_batch(c[1], c[0]), chunks)
                ):
                    out[start : start + len(chunk)] = vecs
        else:
            for start, chunk in chunks:
                out[start : start + len(chunk)] = self._post_batch(chunk, start)
        return out

    def _post_batch(self, texts: Sequence[str], completed_before: int) -> np.ndarray:
        import httpx

        body = {"texts": list(texts), "max_tokens": self.cfg.max_tokens}
        last_error: Exception | None = None
        for attempt in range(self.RETRIES):
            try:
                resp = self._client.post(self.cfg.endpoint, json=body)
                if resp.status_code != 200:
                    raise EmbedServiceError(
                        f"embed endpoint returned {resp.status_code}: {resp.text[:200]}",
                        completed=completed_before,
                    )
                return self._parse_response(resp.json(), len(texts), completed_before)
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last_error = exc
                delay = self.BACKOFF_S * (2**attempt)
                logger.warning(
                    "embed request failed (attempt %d/%d), retrying in %.2fs: %s",
                    attempt + 1,
                    self.RETRIES,
                    delay,
                    exc,
                )
                time.sleep(delay)
        raise EmbedServiceError(
            f"embed endpoint unreachable after {self.RETRIES} attempts: {last_error}",
            completed=completed_before,
        )

    def _parse_response(self, payload, expected: int, completed_before: int) -> np.ndarray:
        try:
            dim = int(payload["dim"])
            vectors = payload["vectors"]
        except (KeyError, TypeError) as exc:
            raise EmbedServiceError(
                f"malformed embed response: {exc}", completed=completed_before
            ) from exc
        if dim != self.cfg.dim:
            raise UsageError(
                f"embedding dim mismatch: service produces {dim}, client expects {self.cfg.dim}"
            )
        if len(vectors) != expected:
            raise EmbedServiceError(
                f"embed response has {len(vectors)} vectors for {expected} texts",
                completed=completed_before,
            )
        arr = np.asarray(vectors, dtype=np.float32)
        if arr.shape != (expected, dim) or not np.all(np.isfinite(arr)):
            raise EmbedServiceError(
                "embed response contains non-finite or misshapen vectors; batch rejected",
                completed=completed_before,
            )
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            arr = arr / norms[:, None]
        return arr


def make_embedder(cfg: EmbedderConfig):
    if cfg.kind == "local_hash":
        return LocalHashEmbedder(cfg)
    return RemoteEmbedder(cfg)


def embed_batch(fragments: Sequence[CodeFragment], cfg: EmbedderConfig) -> np.ndarray:
    """One unit-norm row per fragment, order preserved."""
    for i, frag in enumerate(fragments):
        if not frag.token_stream:
            raise ValueError(f"fragment {i} ({frag.file_path}) has an empty token stream")
    return make_embedder(cfg).embed_fragments(fragments)


class MatrixWriter:
    """Streaming writer for the embedding matrix file (header then f32 rows).

    With ``append=True`` an existing file is extended; the header count is
    rewritten on close either way, so a crashed run leaves the previous
    consistent count behind.
    """

    def __init__(
        self, path: Path, dim: int, append: bool = False, truncate_to: int | None = None
    ):
        self.path = Path(path)
        self.dim = dim
        self.count = 0
        try:
            if append and self.path.exists():
                prev_dim, prev_count = read_matrix_header(self.path)
                if prev_dim != dim:
                    raise IntegrityError(
                        f"matrix file {path} has dim {prev_dim}, expected {dim}"
                    )
                self.count = prev_count if truncate_to is None else truncate_to
                self._fh = open(self.path, "r+b")
                self._fh.seek(_MATRIX_HEADER.size + self.count * dim * 4)
                self._fh.truncate()
            else:
                self._fh = open(self.path, "wb")
                self._fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, dim, 0))
        except OSError as exc:
            raise StorageError(f"cannot create matrix file {path}: {exc}") from exc

    def append(self, rows: np.ndarray) -> None:
        rows = np.ascontiguousarray(rows, dtype="<f4")
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"expected rows of dim {self.dim}, got {rows.shape}")
        self._fh.write(rows.tobytes())
        self.count += rows.shape[0]

    def sync_header(self) -> None:
        """Persist the current row count; readers then see a consistent file."""
        pos = self._fh.tell()
        self._fh.seek(0)
        self._fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, self.dim, self.count))
        self._fh.seek(pos)
        self._fh.flush()

    def close(self) -> None:
        self.sync_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    with MatrixWriter(path, matrix.shape[1]) as w:
        w.append(matrix)


def read_matrix_header(path: Path) -> tuple[int, int]:
    """Return (dim, count) after validating magic and version."""
    with open(path, "rb") as fh:
        head = fh.read(_MATRIX_HEADER.size)
    if len(head) < _MATRIX_HEADER.size:
        raise IntegrityError(f"matrix file {path} is truncated")
    magic, version, dim, count = _MATRIX_HEADER.unpack(head)
    if magic != MATRIX_MAGIC:
        raise IntegrityError(f"matrix file {path} has bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise IntegrityError(f"matrix file {path} has unsupported version {version}")
    return dim, count


def open_matrix(path: Path) -> np.ndarray:
    """Memory-map the matrix rows; the file stays on disk."""
    dim, count = read_matrix_header(path)
    return np.memmap(path, dtype="<f4", mode="r", offset=_MATRIX_HEADER.size, shape=(count, dim))


def read_matrix_rows(path: Path, start: int, count: int) -> np.ndarray:
    """Read a contiguous row range with plain file I/O (no mapping).

    Unlike slicing a memmap this leaves no file-backed pages charged to the
    process, which keeps batch builds inside a strict memory budget.
    """
    dim, total = read_matrix_header(path)
    start = max(0, start)
    count = min(count, total - start)
    if count <= 0:
        return np.empty((0, dim), dtype=np.float32)
    offset = _MATRIX_HEADER.size + start * dim * 4
    rows = np.fromfile(path, dtype="<f4", count=count * dim, offset=offset)
    return rows.reshape(count, dim)


def read_matrix_row_set(path: Path, rows: np.ndarray) -> np.ndarray:
    """Gather arbitrary rows with seek+read, one row resident at a time."""
    dim, total = read_matrix_header(path)
    out = np.empty((len(rows), dim), dtype=np.float32)
    row_bytes = dim * 4
    with open(path, "rb") as fh:
        for i, row in enumerate(rows):
            if not 0 <= row < total:
                raise IntegrityError(f"row {row} outside matrix of {total} rows")
            fh.seek(_MATRIX_HEADER.size + int(row) * row_bytes)
            out[i] = np.frombuffer(fh.read(row_bytes), dtype="<f4")
    return out


def read_matrix(path: Path) -> np.ndarray:
    return np.array(open_matrix(path))


IDS_MAGIC = b"DBSI"
_IDS_HEADER = struct.Struct("<4sIIQ")  # magic, version, reserved, count


class IdsWriter:
    """Sidecar u64 id list aligned row-for-row with a matrix file."""

    def __init__(self, path: Path, append: bool = False, truncate_to: int | None = None):
        self.path = Path(path)
        self.count = 0
        if append and self.path.exists():
            # header only: a crashed run may have stale counts with extra payload
            with open(self.path, "rb") as fh:
                head = fh.read(_IDS_HEADER.size)
            magic, version, _, prev_count = _IDS_HEADER.unpack(head)
            if magic != IDS_MAGIC or version != MATRIX_VERSION:
                raise IntegrityError(f"ids file {path} has bad header")
            self.count = prev_count if truncate_to is None else truncate_to
            self._fh = open(self.path, "r+b")
            self._fh.seek(_IDS_HEADER.size + self.count * 8)
            self._fh.truncate()
        else:
            self._fh = open(self.path, "wb")
            self._fh.write(_IDS_HEADER.pack(IDS_MAGIC, MATRIX_VERSION, 0, 0))

    def append(self, ids: np.ndarray) -> None:
        arr = np.ascontiguousarray(ids, dtype="<u8")
        self._fh.write(arr.tobytes())
        self.count += arr.size

    def sync_header(self) -> None:
        pos = self._fh.tell()
        self._fh.seek(0)
        self._fh.write(_IDS_HEADER.pack(IDS_MAGIC, MATRIX_VERSION, 0, self.count))
        self._fh.seek(pos)
        self._fh.flush()

    def close(self) -> None:
        self.sync_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_ids(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_IDS_HEADER.size)
    if len(head) < _IDS_HEADER.size:
        raise IntegrityError(f"ids file {path} is truncated")
    magic, version, _, count = _IDS_HEADER.unpack(head)
    if magic != IDS_MAGIC:
        raise IntegrityError(f"ids file {path} has bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise IntegrityError(f"ids file {path} has unsupported version {version}")
    data = np.fromfile(path, dtype="<u8", offset=_IDS_HEADER.size)
    if data.size != count:
        raise IntegrityError(f"ids file {path}: header count {count} != payload {data.size}")
    return data
