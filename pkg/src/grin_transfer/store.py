"""Single-file SQLite store tracking every volume's GRIN state and sync history.

Schema (``volumes`` table, one row per barcode) is documented in the README so
operators can build barcode lists with plain SQL. List-valued MARC fields are
JSON arrays in the database and ``|``-joined in the CSV export.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sqlite3
import threading
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from .protocol.codec import CONDITION_FIELDS, DATE_FIELDS, GrinState, VolumeListing

log = logging.getLogger(__name__)

SCHEMA_VERSION = 2
DEFAULT_STORE_PATH = Path("grin-transfer.db")


class StoreError(Exception):
    pass


class SchemaVersionError(StoreError):
    pass


class StoreCorruptError(StoreError):
    pass


class UnknownBarcode(StoreError, KeyError):
    pass


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def to_iso(value: datetime | None) -> str | None:
    if value is None:
        return None
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc).isoformat()


def from_iso(value: str | None) -> datetime | None:
    return datetime.fromisoformat(value) if value else None


_GRIN_DATE_FORMATS = ("%Y/%m/%d %H:%M", "%Y/%m/%d %H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d", "%Y-%m-%d")


def parse_grin_date(raw: str | None) -> str | None:
    """Best-effort UTC ISO form of a GRIN date string; None when unrecognised."""
    if not raw:
        return None
    raw = raw.strip()
    for fmt in _GRIN_DATE_FORMATS:
        try:
            return to_iso(datetime.strptime(raw, fmt))
        except ValueError:
            continue
    try:
        return to_iso(datetime.fromisoformat(raw))
    except ValueError:
        return None


@dataclass
class MarcMetadata:
    control_number: str | None = None
    date_type: str | None = None
    date_1: str | None = None
    date_2: str | None = None
    language: str | None = None
    lccn: str | None = None
    lc_call_number: str | None = None
    isbns: list[str] = field(default_factory=list)
    oclc_numbers: list[str] = field(default_factory=list)
    title: str | None = None
    subtitles: list[str] = field(default_factory=list)
    personal_authors: list[str] = field(default_factory=list)
    corporate_authors: list[str] = field(default_factory=list)
    meeting_authors: list[str] = field(default_factory=list)
    subjects: list[str] = field(default_factory=list)
    genres: list[str] = field(default_factory=list)
    general_notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for f in MARC_LIST_FIELDS:
            setattr(self, f, [v for v in getattr(self, f) if v])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MarcMetadata":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


MARC_FIELDS = tuple(f.name for f in dataclasses.fields(MarcMetadata))
MARC_LIST_FIELDS = ("isbns", "oclc_numbers", "subtitles", "personal_authors", "corporate_authors",
                    "meeting_authors", "subjects", "genres", "general_notes")


@dataclass
class VolumeRecord:
    barcode: str
    grin_state: GrinState = GrinState.UNCONVERTED
    title: str | None = None
    google_books_url: str | None = None
    # parsed timestamps (UTC ISO) keyed by DATE_FIELDS, plus the verbatim strings
    dates: dict[str, str | None] = field(default_factory=dict)
    dates_raw: dict[str, str | None] = field(default_factory=dict)
    conditions: dict[str, str | None] = field(default_factory=dict)
    marc: MarcMetadata | None = None
    stored_etag: str | None = None
    last_synced_at: datetime | None = None
    storage_key: str | None = None
    last_error: tuple[str, str, datetime] | None = None
    enriched_at: datetime | None = None
    missing_from_listing: bool = False


@dataclass
class RunSummary:
    stage: str
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    started_at: datetime = field(default_factory=utcnow)
    ended_at: datetime | None = None
    counters: dict[str, int] = field(default_factory=dict)
    queue_full_hit: bool = False

    COUNTER_NAMES = ("collected", "conversion_requested", "probed", "skipped_identical", "not_available",
                     "downloaded", "decrypted", "extracted", "uploaded", "failed", "enriched", "missing")

    def __post_init__(self):
        self._lock = threading.Lock()
        for name in self.COUNTER_NAMES:
            self.counters.setdefault(name, 0)

    def incr(self, name: str, by: int = 1) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + by

    def finish(self) -> "RunSummary":
        self.ended_at = utcnow()
        return self

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "started_at": to_iso(self.started_at),
            "ended_at": to_iso(self.ended_at),
            "counters": dict(self.counters),
            "queue_full_hit": self.queue_full_hit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        return cls(
            stage=data["stage"],
            run_id=data["run_id"],
            started_at=from_iso(data["started_at"]),
            ended_at=from_iso(data.get("ended_at")),
            counters=dict(data.get("counters", {})),
            queue_full_hit=bool(data.get("queue_full_hit")),
        )


class Queue(str, Enum):
    UNCONVERTED = "unconverted"
    CONVERTED = "converted"
    PREVIOUS = "previous"


_QUEUE_STATES = {
    Queue.UNCONVERTED: GrinState.UNCONVERTED,
    Queue.CONVERTED: GrinState.CONVERTED,
    Queue.PREVIOUS: GrinState.PREVIOUSLY_DOWNLOADED,
}

# ---------------------------------------------------------------------------
# schema

_SERVER_COLUMNS = (
    ["grin_state", "title", "google_books_url"]
    + [f"{d}_raw" for d in DATE_FIELDS]
    + list(DATE_FIELDS)
)


def _run_script(conn: sqlite3.Connection, script: str) -> None:
    # executescript() would commit the surrounding migration transaction
    for statement in script.split(";"):
        if statement.strip():
            conn.execute(statement)


def _migrate_1(conn: sqlite3.Connection) -> None:
    date_cols = ",\n".join(f"{d}_raw TEXT, {d} TEXT" for d in DATE_FIELDS)
    cond_cols = ",\n".join(f"{c} TEXT" for c in CONDITION_FIELDS)
    marc_cols = ",\n".join(f"marc_{m} TEXT" for m in MARC_FIELDS)
    _run_script(conn, f"""
        CREATE TABLE volumes (
            barcode TEXT PRIMARY KEY,
            grin_state TEXT NOT NULL DEFAULT 'UNCONVERTED',
            title TEXT,
            google_books_url TEXT,
            {date_cols},
            {cond_cols},
            {marc_cols},
            stored_etag TEXT,
            last_synced_at TEXT,
            storage_key TEXT,
            last_error_code TEXT,
            last_error_message TEXT,
            last_error_at TEXT,
            enriched_at TEXT,
            first_seen_at TEXT,
            updated_at TEXT,
            CHECK ((stored_etag IS NULL) = (last_synced_at IS NULL)
               AND (stored_etag IS NULL) = (storage_key IS NULL))
        );
        CREATE INDEX volumes_state ON volumes (grin_state);
        CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT);
        CREATE TABLE run_summaries (
            run_id TEXT PRIMARY KEY,
            stage TEXT NOT NULL,
            started_at TEXT NOT NULL,
            ended_at TEXT,
            queue_full_hit INTEGER NOT NULL DEFAULT 0,
            counters TEXT NOT NULL
        );
        """)


def _migrate_2(conn: sqlite3.Connection) -> None:
    _run_script(conn, """
        ALTER TABLE volumes ADD COLUMN missing_from_listing INTEGER NOT NULL DEFAULT 0;
        CREATE TABLE volume_extras (
            barcode TEXT NOT NULL REFERENCES volumes (barcode),
            key TEXT NOT NULL,
            value TEXT,
            PRIMARY KEY (barcode, key)
        );
        """)


MIGRATIONS = {1: _migrate_1, 2: _migrate_2}

CSV_COLUMNS = (
    ["barcode", "grin_state", "title", "google_books_url"]
    + [f"{d}_raw" for d in DATE_FIELDS]
    + list(CONDITION_FIELDS)
    + [f"marc_{m}" for m in MARC_FIELDS]
    + ["stored_etag", "last_synced_at", "storage_key", "last_error_code", "last_error_message",
       "last_error_at", "enriched_at", "missing_from_listing"]
)


def escape_list(values: Sequence[str]) -> str:
    return "|".join(v.replace("\\", "\\\\").replace("|", "\\|") for v in values)


def unescape_list(text: str) -> list[str]:
    if text == "":
        return []
    out, cur, i = [], [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            cur.append(text[i + 1])
            i += 2
            continue
        if c == "|":
            out.append("".join(cur))
            cur = []
        else:
            cur.append(c)
        i += 1
    out.append("".join(cur))
    return out


class VolumeStore:
    """Handle on the tracking database. Writes are serialised by one lock;
    WAL mode lets readers in other connections proceed meanwhile."""

    def __init__(self, path: Path | str, expected_version: int = SCHEMA_VERSION):
        self.path = Path(path)
        self._write_lock = threading.RLock()
        try:
            self._conn = sqlite3.connect(self.path, timeout=30, check_same_thread=False, isolation_level=None)
            self._conn.row_factory = sqlite3.Row
            version = self._conn.execute("PRAGMA user_version").fetchone()[0]
            if version <= expected_version:
                self._conn.execute("PRAGMA journal_mode=WAL")
                self._conn.execute("PRAGMA foreign_keys=ON")
        except sqlite3.DatabaseError as exc:
            raise StoreCorruptError(
                f"{self.path} is not a readable SQLite database ({exc}); restore it from a snapshot"
            ) from exc
        if version > expected_version:
            self._conn.close()
            raise SchemaVersionError(
                f"{self.path} has schema version {version}, newer than supported {expected_version}"
            )
        for v in range(version + 1, expected_version + 1):
            with self.transaction() as conn:
                MIGRATIONS[v](conn)
                conn.execute(f"PRAGMA user_version = {v}")
            log.info("migrated %s to schema version %d", self.path, v)
        self.schema_version = expected_version

    def close(self) -> None:
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @contextmanager
    def transaction(self) -> Iterator[sqlite3.Connection]:
        with self._write_lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                yield self._conn
            except BaseException:
                self._conn.execute("ROLLBACK")
                raise
            self._conn.execute("COMMIT")

    def query(self, sql: str, params: Sequence = ()) -> list[sqlite3.Row]:
        with self._write_lock:
            return self._conn.execute(sql, params).fetchall()

    # -- meta --------------------------------------------------------------

    def get_meta(self, key: str) -> str | None:
        rows = self.query("SELECT value FROM meta WHERE key = ?", (key,))
        return rows[0]["value"] if rows else None

    def set_meta(self, key: str, value: str | None, conn: sqlite3.Connection | None = None) -> None:
        def _do(c):
            if value is None:
                c.execute("DELETE FROM meta WHERE key = ?", (key,))
            else:
                c.execute("INSERT INTO meta (key, value) VALUES (?, ?) ON CONFLICT(key) DO UPDATE SET value = excluded.value", (key, value))
        if conn is not None:
            _do(conn)
        else:
            with self.transaction() as c:
                _do(c)

    # -- volumes -----------------------------------------------------------

    def upsert_volumes(self, listings: Iterable[VolumeListing], conn: sqlite3.Connection | None = None) -> tuple[int, int]:
        """Mirror server-sourced fields; locally-owned columns are never touched."""
        if conn is None:
            with self.transaction() as c:
                return self.upsert_volumes(listings, c)
        inserted = updated = 0
        now = to_iso(utcnow())
        cols = _SERVER_COLUMNS + ["missing_from_listing"]
        assignments = ", ".join(f"{c} = excluded.{c}" for c in cols)
        sql = (
            f"INSERT INTO volumes (barcode, {', '.join(cols)}, first_seen_at, updated_at) "
            f"VALUES (?, {', '.join('?' for _ in cols)}, ?, ?) "
            f"ON CONFLICT(barcode) DO UPDATE SET {assignments}, updated_at = excluded.updated_at "
            f"WHERE NOT ({' AND '.join(f'volumes.{c} IS excluded.{c}' for c in cols)})"
        )
        for item in listings:
            exists = conn.execute("SELECT 1 FROM volumes WHERE barcode = ?", (item.barcode,)).fetchone()
            values = [item.grin_state.value, item.title, item.google_books_url]
            values += [getattr(item, d) for d in DATE_FIELDS]
            values += [parse_grin_date(getattr(item, d)) for d in DATE_FIELDS]
            values.append(0)
            conn.execute(sql, [item.barcode, *values, now, now])
            if item.extras:
                conn.executemany(
                    "INSERT INTO volume_extras (barcode, key, value) VALUES (?, ?, ?) "
                    "ON CONFLICT(barcode, key) DO UPDATE SET value = excluded.value",
                    [(item.barcode, k, v) for k, v in item.extras.items()],
                )
            if exists:
                updated += 1
            else:
                inserted += 1
        return inserted, updated

    def mark_missing(self, present: set[str]) -> int:
        """Flag rows absent from a complete listing pass (never deletes)."""
        with self.transaction() as conn:
            rows = conn.execute("SELECT barcode FROM volumes WHERE missing_from_listing = 0").fetchall()
            gone = [r["barcode"] for r in rows if r["barcode"] not in present]
            conn.executemany("UPDATE volumes SET missing_from_listing = 1 WHERE barcode = ?", [(b,) for b in gone])
        return len(gone)

    def set_state(self, barcodes: Iterable[str], state: GrinState) -> None:
        with self.transaction() as conn:
            conn.executemany(
                "UPDATE volumes SET grin_state = ?, updated_at = ? WHERE barcode = ?",
                [(state.value, to_iso(utcnow()), b) for b in barcodes],
            )

    def _require(self, conn, barcode: str) -> None:
        if not conn.execute("SELECT 1 FROM volumes WHERE barcode = ?", (barcode,)).fetchone():
            raise UnknownBarcode(barcode)

    def record_sync(self, barcode: str, etag: str, storage_key: str, at: datetime | None = None) -> VolumeRecord:
        at = at or utcnow()
        with self.transaction() as conn:
            self._require(conn, barcode)
            conn.execute(
                "UPDATE volumes SET stored_etag = ?, last_synced_at = ?, storage_key = ?, "
                "last_error_code = NULL, last_error_message = NULL, last_error_at = NULL, updated_at = ? "
                "WHERE barcode = ?",
                (etag, to_iso(at), storage_key, to_iso(utcnow()), barcode),
            )
        return self.get(barcode)

    def record_error(self, barcode: str, code: str, message: str, at: datetime | None = None) -> VolumeRecord:
        at = at or utcnow()
        with self.transaction() as conn:
            self._require(conn, barcode)
            conn.execute(
                "UPDATE volumes SET last_error_code = ?, last_error_message = ?, last_error_at = ?, updated_at = ? WHERE barcode = ?",
                (code, message, to_iso(at), to_iso(utcnow()), barcode),
            )
        return self.get(barcode)

    def record_marc(self, barcode: str, marc: MarcMetadata) -> None:
        data = marc.to_dict()
        values = [json.dumps(v, ensure_ascii=False) if isinstance(v, list) else v for v in data.values()]
        assignments = ", ".join(f"marc_{k} = ?" for k in data)
        with self.transaction() as conn:
            self._require(conn, barcode)
            conn.execute(f"UPDATE volumes SET {assignments} WHERE barcode = ?", [*values, barcode])

    def record_details(self, barcode: str, details: dict[str, str | None], at: datetime | None = None) -> None:
        cols = [c for c in CONDITION_FIELDS if c in details]
        assignments = ", ".join(f"{c} = ?" for c in cols)
        with self.transaction() as conn:
            self._require(conn, barcode)
            conn.execute(
                f"UPDATE volumes SET {assignments}{', ' if cols else ''}enriched_at = ? WHERE barcode = ?",
                [*(details[c] for c in cols), to_iso(at or utcnow()), barcode],
            )

    def get(self, barcode: str) -> VolumeRecord | None:
        rows = self.query("SELECT * FROM volumes WHERE barcode = ?", (barcode,))
        return _row_to_record(rows[0]) if rows else None

    def extras(self, barcode: str) -> dict[str, str]:
        return {r["key"]: r["value"] for r in self.query("SELECT key, value FROM volume_extras WHERE barcode = ?", (barcode,))}

    def barcodes(self) -> list[str]:
        return [r["barcode"] for r in self.query("SELECT barcode FROM volumes ORDER BY barcode")]

    def count(self) -> int:
        return self.query("SELECT COUNT(*) AS n FROM volumes")[0]["n"]

    def state_counts(self) -> dict[str, int]:
        return {r["grin_state"]: r["n"] for r in self.query("SELECT grin_state, COUNT(*) AS n FROM volumes GROUP BY grin_state")}

    def select_queue(self, queue: Queue | str | Sequence[str], limit: int | None = None) -> tuple[list[str], list[str]]:
        """Barcodes for a named queue, or an explicit list filtered to known rows.
        Returns (barcodes in ascending order, barcodes not in the store)."""
        if isinstance(queue, (Queue, str)) and not isinstance(queue, (list, tuple)):
            state = _QUEUE_STATES[Queue(queue)]
            sql = "SELECT barcode FROM volumes WHERE grin_state = ? ORDER BY barcode"
            params: list = [state.value]
            if limit is not None:
                sql += " LIMIT ?"
                params.append(limit)
            return [r["barcode"] for r in self.query(sql, params)], []
        wanted = list(dict.fromkeys(queue))
        known = set()
        for i in range(0, len(wanted), 500):
            chunk = wanted[i:i + 500]
            rows = self.query(f"SELECT barcode FROM volumes WHERE barcode IN ({','.join('?' for _ in chunk)})", chunk)
            known.update(r["barcode"] for r in rows)
        found = sorted(b for b in wanted if b in known)
        if limit is not None:
            found = found[:limit]
        return found, [b for b in wanted if b not in known]

    # -- export / snapshot / summaries ---------------------------------------

    def export_rows(self) -> Iterator[dict[str, str]]:
        cols = [c for c in CSV_COLUMNS if c != "missing_from_listing"]
        for row in self.query(f"SELECT {', '.join(cols)}, missing_from_listing FROM volumes ORDER BY barcode"):
            out = {}
            for c in CSV_COLUMNS:
                v = row[c]
                if c.startswith("marc_") and c[5:] in MARC_LIST_FIELDS and v is not None:
                    v = escape_list(json.loads(v))
                out[c] = "" if v is None else str(v)
            yield out

    def export_csv(self, target: Path | str | IO[str]) -> int:
        """RFC 4180 CSV of every volume; returns the number of data rows."""
        if hasattr(target, "write"):
            return self._write_csv(target)
        path = Path(target)
        try:
            fh = open(path, "w", encoding="utf-8", newline="")
        except OSError as exc:
            raise StoreError(f"cannot write CSV to {path}: {exc.strerror}") from exc
        with fh:
            return self._write_csv(fh)

    def _write_csv(self, fh: IO[str]) -> int:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        n = 0
        for row in self.export_rows():
            writer.writerow(row)
            n += 1
        return n

    def snapshot(self, dest_dir: Path | str, keep: int = 5) -> Path:
        """Consistent copy via the SQLite backup API, named by UTC timestamp."""
        dest_dir = Path(dest_dir)
        dest_dir.mkdir(parents=True, exist_ok=True)
        stamp = utcnow().strftime("%Y%m%dT%H%M%S%fZ")
        target = dest_dir / f"{self.path.stem}-{stamp}.db"
        with self._write_lock:
            dst = sqlite3.connect(target)
            try:
                self._conn.backup(dst)
            finally:
                dst.close()
        snapshots = sorted(dest_dir.glob(f"{self.path.stem}-*.db"))
        for old in snapshots[: max(0, len(snapshots) - keep)]:
            old.unlink()
        return target

    def write_run_summary(self, summary: RunSummary, runs_dir: Path | str | None = None) -> Path:
        data = summary.to_dict()
        with self.transaction() as conn:
            conn.execute(
                "INSERT INTO run_summaries (run_id, stage, started_at, ended_at, queue_full_hit, counters) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                (data["run_id"], data["stage"], data["started_at"], data["ended_at"],
                 int(summary.queue_full_hit), json.dumps(data["counters"], sort_keys=True)),
            )
        runs_dir = Path(runs_dir) if runs_dir else self.path.parent / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        out = runs_dir / f"{data['started_at'].replace(':', '')}-{summary.stage}-{summary.run_id}.json"
        out.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out

    def run_summaries(self, stage: str | None = None) -> list[RunSummary]:
        sql = "SELECT * FROM run_summaries"
        params: list = []
        if stage:
            sql += " WHERE stage = ?"
            params.append(stage)
        out = []
        for r in self.query(sql + " ORDER BY started_at", params):
            out.append(RunSummary.from_dict({
                "run_id": r["run_id"], "stage": r["stage"], "started_at": r["started_at"],
                "ended_at": r["ended_at"], "counters": json.loads(r["counters"]),
                "queue_full_hit": bool(r["queue_full_hit"]),
            }))
        return out


def _row_to_record(row: sqlite3.Row) -> VolumeRecord:
    marc = None
    if any(row[f"marc_{m}"] is not None for m in MARC_FIELDS):
        data = {}
        for m in MARC_FIELDS:
            v = row[f"marc_{m}"]
            data[m] = json.loads(v) if (m in MARC_LIST_FIELDS and v is not None) else v
            if m in MARC_LIST_FIELDS and data[m] is None:
                data[m] = []
        marc = MarcMetadata(**data)
    error = None
    if row["last_error_code"] is not None:
        error = (row["last_error_code"], row["last_error_message"], from_iso(row["last_error_at"]))
    return VolumeRecord(
        barcode=row["barcode"],
        grin_state=GrinState(row["grin_state"]),
        title=row["title"],
        google_books_url=row["google_books_url"],
        dates={d: row[d] for d in DATE_FIELDS},
        dates_raw={d: row[f"{d}_raw"] for d in DATE_FIELDS},
        conditions={c: row[c] for c in CONDITION_FIELDS},
        marc=marc,
        stored_etag=row["stored_etag"],
        last_synced_at=from_iso(row["last_synced_at"]),
        storage_key=row["storage_key"],
        last_error=error,
        enriched_at=from_iso(row["enriched_at"]),
        missing_from_listing=bool(row["missing_from_listing"]),
    )


def open_store(path: Path | str = DEFAULT_STORE_PATH, expected_schema_version: int = SCHEMA_VERSION) -> VolumeStore:
    return VolumeStore(path, expected_schema_version)
