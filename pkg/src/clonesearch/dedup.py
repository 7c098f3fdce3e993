"""Type-1 deduplication cache.

Fragments identical up to whitespace (and comments, which the tokenizer
strips) hash to the same 128-bit fingerprint. Only the first sighting of a
fingerprint gets a vector id; later sightings are recorded as duplicates so
every location stays reachable at search time.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import IntegrityError, StorageError

HASH_ALGO = "blake2b-128/tokens-v1"

_MAGIC = b"T1DC"
_VERSION = 1
_HEADER = struct.Struct("<4sI")
_ENTRY = struct.Struct("<16sQ")  # digest, vector id; little-endian
_SEP = b"\x1f"


@dataclass(frozen=True)
class Fingerprint:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 16:
            raise ValueError("fingerprint digest must be 16 bytes")

    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class DedupDecision:
    kind: str  # "unique" | "duplicate"
    vector_id: int
    representative_id: int | None = None

    @property
    def is_unique(self) -> bool:
        return self.kind == "unique"


def fingerprint(token_stream: Iterable[str]) -> Fingerprint:
    """Hash a token stream, ignoring the whitespace that once separated tokens."""
    tokens = tuple(token_stream)
    if not tokens:
        raise ValueError("cannot fingerprint an empty token stream")
    h = hashlib.blake2b(digest_size=16)
    for i, tok in enumerate(tokens):
        if i:
            h.update(_SEP)
        h.update(tok.encode("utf-8"))
    return Fingerprint(h.digest())


class DedupCache:
    """digest -> vector id map, persisted as a sorted little-endian table.

    Single-writer during indexing: check_and_register assigns vector ids in
    first-seen order, which the deterministic scan order makes reproducible.
    """

    def __init__(self):
        self._table: dict[bytes, int] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._table)

    @property
    def next_vector_id(self) -> int:
        return self._next_id

    def check_and_register(
        self, fp: Fingerprint, candidate_id: int | None = None
    ) -> DedupDecision:
        """First sighting registers a vector id; later ones point at it.

        The id is ``candidate_id`` when the caller manages the id space
        (the indexing pipeline uses parse order), else the next counter.
        """
        existing = self._table.get(fp.digest)
        if existing is not None:
            return DedupDecision("duplicate", existing, representative_id=existing)
        vector_id = self._next_id if candidate_id is None else candidate_id
        self._table[fp.digest] = vector_id
        self._next_id = max(self._next_id, vector_id) + 1
        return DedupDecision("unique", vector_id)

    def lookup(self, fp: Fingerprint) -> int | None:
        return self._table.get(fp.digest)

    def save(self, path: Path) -> None:
        """Write the sorted binary table plus a JSON manifest sidecar."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(_HEADER.pack(_MAGIC, _VERSION))
                for digest in sorted(self._table):
                    fh.write(_ENTRY.pack(digest, self._table[digest]))
                fh.flush()
            tmp.replace(path)
        except OSError as exc:
            raise StorageError(f"cannot persist dedup cache to {path}: {exc}") from exc
        manifest = {
            "count": len(self._table),
            "next_vector_id": self._next_id,
            "hash_algo": HASH_ALGO,
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path: Path) -> "DedupCache":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read dedup cache {path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise IntegrityError(f"dedup cache {path} is truncated")
        magic, version = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise IntegrityError(f"dedup cache {path} has bad magic {magic!r}")
        if version != _VERSION:
            raise IntegrityError(f"dedup cache {path} has unsupported version {version}")
        body = raw[_HEADER.size :]
        if len(body) % _ENTRY.size:
            raise IntegrityError(f"dedup cache {path} has a partial entry")
        cache = cls()
        for off in range(0, len(body), _ENTRY.size):
            digest, vector_id = _ENTRY.unpack_from(body, off)
            cache._table[digest] = vector_id
        cache._next_id = max(cache._table.values(), default=-1) + 1
        manifest_path = path.with_suffix(".json")
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            if manifest.get("count") != len(cache._table):
                raise IntegrityError(
                    f"dedup cache {path}: manifest count {manifest.get('count')} "
                    f"!= table count {len(cache._table)}"
                )
        return cache
