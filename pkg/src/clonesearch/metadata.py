"""Durable vector-id -> source-location mapping, backed by SQLite.

One row per parsed fragment. Indexed rows (representative of a Type-1
class, or simply unique) own the vector id used by the IVF index; duplicate
rows point at their representative so every location stays reachable at
query time. Writes are batched 10,000 rows per transaction.
"""

from __future__ import annotations

import sqlite3
from dataclasses import dataclass
from pathlib import Path

from .errors import IntegrityError, StorageError

SCHEMA_VERSION = 1
BATCH_ROWS = 10_000

_SCHEMA = """
CREATE TABLE IF NOT EXISTS fragments (
    fragment_id INTEGER PRIMARY KEY,
    file_path TEXT NOT NULL,
    start_line INTEGER NOT NULL,
    end_line INTEGER NOT NULL,
    fingerprint BLOB NOT NULL,
    representative_id INTEGER NULL REFERENCES fragments(fragment_id),
    UNIQUE (file_path, start_line)
);
CREATE INDEX IF NOT EXISTS idx_fragments_rep ON fragments(representative_id);
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
"""


@dataclass(frozen=True)
class FragmentMeta:
    fragment_id: int
    file_path: str
    start_line: int
    end_line: int
    fingerprint: bytes
    representative_id: int | None = None

    @property
    def indexed(self) -> bool:
        """True iff an embedding exists in the index under fragment_id."""
        return self.representative_id is None


class MetadataStore:
    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            # check_same_thread off: the service reads from worker threads;
            # sqlite's serialized mode makes the shared connection safe
            self._conn = sqlite3.connect(self.path, check_same_thread=False)
        except sqlite3.Error as exc:
            raise StorageError(f"cannot open metadata store {path}: {exc}") from exc
        self._conn.executescript(_SCHEMA)
        self._conn.execute(
            "INSERT OR IGNORE INTO meta (key, value) VALUES ('schema_version', ?)",
            (str(SCHEMA_VERSION),),
        )
        self._conn.commit()
        self._pending = 0

    def close(self) -> None:
        self.flush()
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def put(self, meta: FragmentMeta) -> None:
        if meta.representative_id is not None and meta.representative_id == meta.fragment_id:
            raise IntegrityError(f"fragment {meta.fragment_id} cannot duplicate itself")
        try:
            self._conn.execute(
                "INSERT INTO fragments VALUES (?, ?, ?, ?, ?, ?)",
                (
                    meta.fragment_id,
                    meta.file_path,
                    meta.start_line,
                    meta.end_line,
                    meta.fingerprint,
                    meta.representative_id,
                ),
            )
        except sqlite3.IntegrityError as exc:
            raise IntegrityError(
                f"duplicate fragment row ({meta.file_path}:{meta.start_line}): {exc}"
            ) from exc
        except sqlite3.Error as exc:
            raise StorageError(f"metadata write failed: {exc}") from exc
        self._pending += 1
        if self._pending >= BATCH_ROWS:
            self.flush()

    def flush(self) -> None:
        if self._pending:
            self._conn.commit()
            self._pending = 0

    def get(self, fragment_id: int) -> FragmentMeta:
        row = self._conn.execute(
            "SELECT fragment_id, file_path, start_line, end_line, fingerprint,"
            " representative_id FROM fragments WHERE fragment_id = ?",
            (fragment_id,),
        ).fetchone()
        if row is None:
            raise IntegrityError(f"no metadata for fragment id {fragment_id}")
        return FragmentMeta(*row)

    def duplicates_of(self, representative_id: int) -> list[FragmentMeta]:
        """Every member of a Type-1 class, representative included,
        ordered by (file_path, start_line)."""
        rows = self._conn.execute(
            "SELECT fragment_id, file_path, start_line, end_line, fingerprint,"
            " representative_id FROM fragments"
            " WHERE fragment_id = ? OR representative_id = ?"
            " ORDER BY file_path, start_line",
            (representative_id, representative_id),
        ).fetchall()
        return [FragmentMeta(*row) for row in rows]

    def delete_from(self, fragment_id: int) -> int:
        """Drop rows at or beyond ``fragment_id`` (resume rollback). Returns count."""
        cur = self._conn.execute(
            "DELETE FROM fragments WHERE fragment_id >= ?", (fragment_id,)
        )
        self._conn.commit()
        self._pending = 0
        return cur.rowcount

    def count_rows(self) -> int:
        return self._conn.execute("SELECT COUNT(*) FROM fragments").fetchone()[0]

    def count_indexed(self) -> int:
        return self._conn.execute(
            "SELECT COUNT(*) FROM fragments WHERE representative_id IS NULL"
        ).fetchone()[0]

    def iter_indexed_ids(self, chunk: int = 10_000):
        cur = self._conn.execute(
            "SELECT fragment_id FROM fragments WHERE representative_id IS NULL"
            " ORDER BY fragment_id"
        )
        while True:
            rows = cur.fetchmany(chunk)
            if not rows:
                return
            yield from (r[0] for r in rows)

    def have_ids(self, ids: list[int]) -> list[int]:
        """Subset of ``ids`` that have a metadata row."""
        found: list[int] = []
        for start in range(0, len(ids), 500):
            chunk = ids[start : start + 500]
            marks = ",".join("?" * len(chunk))
            rows = self._conn.execute(
                f"SELECT fragment_id FROM fragments WHERE fragment_id IN ({marks})",
                chunk,
            ).fetchall()
            found.extend(r[0] for r in rows)
        return found

    def verify_against_index(self, index_count: int) -> None:
        """Indexed-row count must equal the manifest's vector count."""
        indexed = self.count_indexed()
        if indexed != index_count:
            raise IntegrityError(
                f"metadata has {indexed} indexed rows but the index holds "
                f"{index_count} vectors"
            )
