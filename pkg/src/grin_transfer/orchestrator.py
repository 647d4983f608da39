"""Run coordination: session lock, resources, queue resolution, summaries.

Every ``run_*`` function takes the session lock for the store, does its stage,
writes a run summary and snapshots the store. ``Session`` is the library-style
way to hold those resources across several calls::

    with Session(config) as s:
        s.sync_volume("32044010000001")
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Iterable, Sequence

from .config import RunConfig
from .conversion import enqueue_conversions, reconcile_failures
from .inventory import collect
from .lock import SessionLock
from .protocol import UNKNOWN, GrinClient, RateLimiter, StaticTokenProvider, validate_barcode
from .retrieval import (
    ArchiveDecryptor,
    GpgDecryptor,
    Outcome,
    Retriever,
    StagingMonitor,
    SyncOptions,
    SyncPipeline,
    SyncResult,
    clean_stale_staging,
)
from .storage import ETAG_METADATA_KEY
from .store import Queue, RunSummary, VolumeStore, open_store

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SOFTWARE = 70  # systemic abort: credentials, store corruption, unexpected crash
EXIT_LOCKED = 75  # another run holds the session lock; this one was skipped
EXIT_CONFIG = 78


@dataclass
class QueueSpec:
    queues: list[Queue] = field(default_factory=list)
    barcodes: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, queues: Iterable[str] = (), barcodes: Iterable[str] = (), barcodes_file: Path | str | None = None) -> "QueueSpec":
        explicit = list(barcodes)
        if barcodes_file is not None:
            explicit += read_barcodes_file(barcodes_file)
        for b in explicit:
            validate_barcode(b)
        return cls([Queue(q) for q in queues], list(dict.fromkeys(explicit)))

    def __bool__(self):
        return bool(self.queues or self.barcodes)


def read_barcodes_file(path: Path | str) -> list[str]:
    """One barcode per row; blank lines and ``#`` comments are ignored.
    Only the first tab/comma/space-separated field counts."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        first = line.replace("\t", " ").replace(",", " ").split()[0]
        if first.lower() != "barcode":
            out.append(first)
    return out


class Session:
    """Lock + store + client + storage + decryptor for one run."""

    def __init__(
        self,
        config: RunConfig,
        *,
        decryptor: ArchiveDecryptor | None = None,
        client: GrinClient | None = None,
        storage=None,
        sleep: Callable[[float], None] = time.sleep,
        take_lock: bool = True,
    ):
        self.config = config
        self._decryptor = decryptor
        self._client = client
        self._storage = storage
        self._sleep = sleep
        self._take_lock = take_lock
        self.lock: SessionLock | None = None
        self.store: VolumeStore | None = None
        self.client: GrinClient | None = None
        self.storage = None
        self.decryptor: ArchiveDecryptor | None = None

    def initialize_resources(self) -> "Session":
        cfg = self.config
        if self._take_lock:
            cfg.store_path.parent.mkdir(parents=True, exist_ok=True)
            self.lock = SessionLock(cfg.store_path, cfg.lock_stale_after).acquire()
        try:
            self.store = open_store(cfg.store_path)
            self.client = self._client or GrinClient(
                cfg.grin_base_url,
                cfg.library_directory,
                StaticTokenProvider(cfg.credentials_ref.resolve()),
                limiter=RateLimiter(cfg.rate),
                head_concurrency=cfg.head_workers,
                get_concurrency=cfg.download_workers,
                sleep=self._sleep,
            )
            self.storage = self._storage
            self.decryptor = self._decryptor
        except BaseException:
            self.cleanup()
            raise
        return self

    def open_storage(self):
        if self.storage is None:
            self.storage = self.config.storage.open()
        return self.storage

    def retriever(self, summary: RunSummary) -> Retriever:
        if self.decryptor is None:
            self.decryptor = GpgDecryptor()
        return Retriever(
            self.client,
            self.store,
            self.open_storage(),
            self.config.staging_root,
            self.config.passphrase_ref.resolve(),
            decryptor=self.decryptor,
            options=SyncOptions(self.config.extract_marc, self.config.extract_ocr),
            summary=summary,
        )

    def finish(self, summary: RunSummary) -> RunSummary:
        summary.finish()
        self.store.write_run_summary(summary, self.config.store_path.parent / "runs")
        try:
            self.store.snapshot(self.config.store_path.parent / "snapshots", self.config.snapshot_keep)
        except Exception as exc:  # a missed snapshot must not fail the run
            log.warning("store snapshot failed: %s", exc)
        log.info("%s run %s finished: %s", summary.stage, summary.run_id, _fmt_counters(summary))
        return summary

    def sync_volume(self, barcode: str) -> SyncResult:
        summary = RunSummary("sync")
        result = self.retriever(summary).sync_volume(barcode)
        self.finish(summary)
        return result

    def cleanup(self) -> None:
        if isinstance(self.decryptor, GpgDecryptor) and self._decryptor is None:
            self.decryptor.close()
        if self.store is not None:
            self.store.close()
            self.store = None
        if self.client is not None:
            # the next run (this process or the next cron launch) only starts
            # once our last requests have left the server's rate window
            self.client.limiter.drain(timeout=self.client.limiter.budget.window + 30)
        if self.lock is not None:
            self.lock.release()
            self.lock = None

    def __enter__(self):
        return self.initialize_resources()

    def __exit__(self, *exc):
        self.cleanup()


def _fmt_counters(summary: RunSummary) -> str:
    return ", ".join(f"{k}={v}" for k, v in summary.counters.items() if v)


def run_collect(config: RunConfig, **session_kwargs) -> RunSummary:
    with Session(config, **session_kwargs) as s:
        summary = RunSummary("collect")
        collect(s.client, s.store, summary, config.page_size)
        return s.finish(summary)


@dataclass
class SyncReport:
    summary: RunSummary
    results: list[SyncResult]
    planned: list[tuple[str, str]] = field(default_factory=list)

    def outcomes(self) -> dict[Outcome, int]:
        counts: dict[Outcome, int] = {}
        for r in self.results:
            counts[r.outcome] = counts.get(r.outcome, 0) + 1
        return counts


class _Snapshotter:
    def __init__(self, session: Session):
        self.session = session
        self.last = time.monotonic()
        self._lock = threading.Lock()

    def maybe(self, _result=None) -> None:
        every = self.session.config.snapshot_every
        with self._lock:
            if time.monotonic() - self.last < every:
                return
            self.last = time.monotonic()
        try:
            self.session.store.snapshot(self.session.config.store_path.parent / "snapshots", self.session.config.snapshot_keep)
        except Exception as exc:
            log.warning("periodic store snapshot failed: %s", exc)


def run_sync(
    config: RunConfig,
    queues: QueueSpec,
    *,
    limit: int | None = None,
    dry_run: bool = False,
    stop: threading.Event | None = None,
    monitor: StagingMonitor | None = None,
    pipeline_hook: Callable[[SyncPipeline], None] | None = None,
    **session_kwargs,
) -> SyncReport:
    """Process each queue in the order given. Per-volume failures are recorded
    and counted; only systemic errors propagate."""
    if not queues:
        raise ValueError("nothing to do: give at least one --queue or --barcode")
    with Session(config, **session_kwargs) as s:
        summary = RunSummary("sync")
        report = SyncReport(summary, [])
        retriever = s.retriever(summary)
        if not dry_run:
            clean_stale_staging(Path(config.staging_root))
            sweep = getattr(retriever.storage, "sweep_partials", None)
            if sweep:
                sweep()
        monitor = monitor or StagingMonitor(
            config.staging_root,
            config.staging_threshold,
            capacity_bytes=config.staging_capacity_bytes,
            poll_interval=config.staging_poll_interval,
        )
        snap = _Snapshotter(s)
        submitted: set[str] = set()

        def pipeline(barcodes: Sequence[str]) -> list[SyncResult]:
            if dry_run:
                return _plan(retriever, barcodes, report)
            p = SyncPipeline(
                retriever,
                monitor,
                head_workers=config.head_workers,
                download_workers=config.download_workers,
                decrypt_workers=config.decrypt_workers,
                upload_workers=config.upload_workers,
                stop=stop,
                on_result=snap.maybe,
            )
            if pipeline_hook:
                pipeline_hook(p)
            results = p.run(barcodes)
            report.results.extend(results)
            return results

        def convert(barcodes: Sequence[str]) -> None:
            if dry_run:
                report.planned += [(b, "request_conversion") for b in barcodes]
                return
            if stop is not None and stop.is_set():
                return
            requested, full = enqueue_conversions(s.client, s.store, barcodes, summary, config.conversion_batch, submitted)
            log.info("requested conversion of %d volumes%s", requested, " (queue full)" if full else "")

        if not dry_run and any(q in (Queue.UNCONVERTED, Queue.PREVIOUS) for q in queues.queues):
            reconcile_failures(s.client, s.store, summary)
        for q in queues.queues:
            if stop is not None and stop.is_set():
                break
            barcodes, _ = s.store.select_queue(q, limit)
            log.info("queue %s: %d volumes", q.value, len(barcodes))
            if q is Queue.UNCONVERTED:
                convert(barcodes)
            elif q is Queue.PREVIOUS:
                results = pipeline(barcodes)
                convert([r.barcode for r in results if r.outcome is Outcome.NOT_AVAILABLE])
            else:
                pipeline(barcodes)
        if queues.barcodes:
            found, missing = s.store.select_queue(queues.barcodes, limit)
            for b in missing:
                log.warning("%s: not in the store; skipped", b)
                summary.incr("missing")
                report.results.append(SyncResult(b, Outcome.MISSING))
            pipeline(found)
        if not dry_run:
            s.finish(summary)
        return report


def _plan(retriever: Retriever, barcodes: Sequence[str], report: SyncReport) -> list[SyncResult]:
    """Probe-only pass: what a real run would do, with no downloads or writes."""
    results = []
    for b in barcodes:
        record = retriever.store.get(b)
        if record is None:
            report.planned.append((b, "missing"))
            continue
        probe = retriever.client.probe_package(b)
        if not probe.available:
            action = "not_available"
        elif record.stored_etag == probe.etag:
            action = "skip_identical"
        else:
            stored = retriever.storage.head_artifact(retriever._key(b))
            same = stored is not None and stored.metadata.get(ETAG_METADATA_KEY) == probe.etag
            action = "skip_identical" if same else "download"
        report.planned.append((b, action))
        if action == "not_available":
            results.append(SyncResult(b, Outcome.NOT_AVAILABLE))
    return results


def run_enrich(config: RunConfig, barcodes: Sequence[str] | None = None, **session_kwargs) -> RunSummary:
    with Session(config, **session_kwargs) as s:
        summary = RunSummary("enrich")
        if barcodes is None:
            targets = s.store.barcodes()
        else:
            targets, missing = s.store.select_queue(list(barcodes))
            summary.incr("missing", len(missing))
        batch = s.client.detail_batch_limit
        for i in range(0, len(targets), batch):
            chunk = targets[i:i + batch]
            details = s.client.fetch_book_details(chunk)
            for b, fields in details.items():
                if fields == UNKNOWN:
                    log.warning("%s: unknown to the detail view", b)
                    continue
                s.store.record_details(b, fields)
                summary.incr("enriched")
            log.info("enriched %d/%d volumes", min(i + batch, len(targets)), len(targets))
        return s.finish(summary)


def run_export(config: RunConfig, target: Path | str | IO[str]) -> int:
    """CSV export reads a consistent snapshot, so it does not need the lock."""
    store = open_store(config.store_path)
    try:
        return store.export_csv(target)
    finally:
        store.close()


def sync_one_volume(barcode: str, config: RunConfig, **session_kwargs) -> SyncResult:
    """Library entry point: set up, sync one barcode, tear down."""
    validate_barcode(barcode)
    with Session(config, **session_kwargs) as s:
        return s.sync_volume(barcode)


def status(config: RunConfig) -> dict:
    from .lock import lock_path_for, read_owner

    store = open_store(config.store_path)
    try:
        runs = store.run_summaries()
        return {
            "store": str(config.store_path),
            "volumes": store.count(),
            "states": store.state_counts(),
            "synced": store.query("SELECT COUNT(*) AS n FROM volumes WHERE stored_etag IS NOT NULL")[0]["n"],
            "errors": store.query("SELECT COUNT(*) AS n FROM volumes WHERE last_error_code IS NOT NULL")[0]["n"],
            "last_runs": [r.to_dict() for r in runs[-5:]],
            "lock": read_owner(lock_path_for(config.store_path)),
        }
    finally:
        store.close()
