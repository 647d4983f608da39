"""Per-volume sync engine and the staged worker pipeline around it.

A volume moves probe -> compare etag -> download -> decrypt -> unpack and
extract -> upload -> record -> clean up. Each step lives on ``Retriever`` so
the same code runs both sequentially (``sync_volume``) and spread across the
thread pools of ``SyncPipeline``.
"""

from __future__ import annotations

import logging
import os
import queue
import shutil
import subprocess
import tarfile
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable, Protocol

from .extraction import ExtractionError, collate_ocr, extract_marc_from_dir
from .protocol import CredentialError, GrinClient, GrinError, IntegrityError, PackageNotAvailable, PackageProbe
from .storage import ETAG_METADATA_KEY, Storage, StorageError, jsonl_key, package_key
from .store import RunSummary, StoreError, VolumeStore

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.90
DEFAULT_POLL_INTERVAL = 5.0


class Outcome(str, Enum):
    SKIPPED_IDENTICAL = "skipped_identical"
    SYNCED = "synced"
    NOT_AVAILABLE = "not_available"
    FAILED = "failed"
    MISSING = "missing"


@dataclass(frozen=True)
class SyncResult:
    barcode: str
    outcome: Outcome
    code: str | None = None
    message: str | None = None


@dataclass(frozen=True)
class SyncOptions:
    extract_marc: bool = True
    extract_ocr: bool = True


class Lifecycle(IntEnum):
    PROBED = 1
    DOWNLOADED = 2
    DECRYPTED = 3
    UNPACKED = 4
    UPLOADED = 5
    CLEANED_UP = 6


@dataclass
class FilePackage:
    barcode: str
    staging_dir: Path
    encrypted_etag: str | None = None
    lifecycle_state: Lifecycle = Lifecycle.PROBED
    decrypted_path: Path | None = None
    unpacked_dir: Path | None = None
    jsonl_path: Path | None = None
    marc_error: str | None = None

    @property
    def encrypted_path(self) -> Path:
        return self.staging_dir / f"{self.barcode}.tar.gz.gpg"

    def advance(self, state: Lifecycle) -> None:
        if state < self.lifecycle_state:
            raise RuntimeError(f"{self.barcode}: lifecycle cannot go from {self.lifecycle_state.name} to {state.name}")
        self.lifecycle_state = state


class VolumeFailure(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class DecryptError(Exception):
    pass


class UnpackError(Exception):
    pass


# ---------------------------------------------------------------------------
# staging


@dataclass(frozen=True)
class StagingStatus:
    used_fraction: float
    paused: bool

    @property
    def ok(self) -> bool:
        return not self.paused


def tree_size(root: Path) -> int:
    total = 0
    try:
        entries = list(os.scandir(root))
    except FileNotFoundError:
        return 0
    for entry in entries:
        try:
            if entry.is_dir(follow_symlinks=False):
                total += tree_size(Path(entry.path))
            else:
                total += entry.stat(follow_symlinks=False).st_size
        except FileNotFoundError:
            continue
    return total


class StagingMonitor:
    """Watches staging usage against a threshold.

    Usage is the filesystem's fill level, or with ``capacity_bytes`` set, the
    bytes under the staging root against that quota. The pause signal always
    reflects the last poll; ``check`` re-polls once ``poll_interval`` has passed.
    """

    def __init__(
        self,
        root: Path | str,
        threshold: float = DEFAULT_THRESHOLD,
        *,
        capacity_bytes: int | None = None,
        poll_interval: float = DEFAULT_POLL_INTERVAL,
        clock: Callable[[], float] = time.monotonic,
    ):
        if not 0 < threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        self.root = Path(root)
        self.threshold = threshold
        self.capacity_bytes = capacity_bytes
        self.poll_interval = poll_interval
        self._clock = clock
        self._last: StagingStatus | None = None
        self._polled_at = float("-inf")
        self._lock = threading.Lock()

    def usage(self) -> tuple[int, int]:
        if self.capacity_bytes is not None:
            return tree_size(self.root), self.capacity_bytes
        du = shutil.disk_usage(self.root)
        return du.used, du.total

    def poll(self) -> StagingStatus:
        used, total = self.usage()
        fraction = used / total if total else 1.0
        status = StagingStatus(fraction, fraction >= self.threshold)
        with self._lock:
            if status.paused and (self._last is None or not self._last.paused):
                log.warning("staging at %.0f%% of capacity (threshold %.0f%%); pausing new downloads",
                            fraction * 100, self.threshold * 100)
            elif self._last is not None and self._last.paused and not status.paused:
                log.info("staging back to %.0f%%; resuming downloads", fraction * 100)
            self._last = status
            self._polled_at = self._clock()
        return status

    def check(self) -> StagingStatus:
        with self._lock:
            fresh = self._last is not None and self._clock() - self._polled_at < self.poll_interval
            last = self._last
        return last if fresh else self.poll()


def check_staging_capacity(monitor: StagingMonitor) -> StagingStatus:
    return monitor.poll()


def clean_stale_staging(root: Path) -> int:
    """Remove per-volume directories left by a killed run. Caller must hold the session lock."""
    removed = 0
    if not root.exists():
        return 0
    for entry in root.iterdir():
        if entry.is_dir():
            shutil.rmtree(entry, ignore_errors=True)
        else:
            entry.unlink(missing_ok=True)
        removed += 1
    if removed:
        log.info("removed %d stale staging entries from %s", removed, root)
    return removed


# ---------------------------------------------------------------------------
# decryption and unpacking


class ArchiveDecryptor(Protocol):
    def decrypt(self, encrypted: Path, output: Path, passphrase: str) -> None: ...


class GpgDecryptor:
    """Symmetric OpenPGP decryption through the ``gpg`` binary.

    The passphrase goes over a pipe, never argv. A private keyring directory
    keeps the operator's own gpg state out of the way; ``close`` stops the
    agent gpg starts in it.
    """

    def __init__(self, binary: str = "gpg", timeout: float | None = 600):
        self.binary = binary
        self.timeout = timeout
        self._home: Path | None = None
        self._lock = threading.Lock()

    def _homedir(self) -> Path:
        with self._lock:
            if self._home is None:
                self._home = Path(tempfile.mkdtemp(prefix="grin-gpg-"))
                self._home.chmod(0o700)
            return self._home

    def decrypt(self, encrypted: Path, output: Path, passphrase: str) -> None:
        tmp = output.with_name(output.name + ".partial")
        cmd = [
            self.binary, "--batch", "--yes", "--quiet", "--no-tty",
            "--pinentry-mode", "loopback", "--passphrase-fd", "0", "--no-symkey-cache",
            "--homedir", str(self._homedir()), "-o", str(tmp), "-d", str(encrypted),
        ]
        try:
            proc = subprocess.run(cmd, input=passphrase.encode("utf-8"), capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            tmp.unlink(missing_ok=True)
            raise DecryptError(f"could not run {self.binary}: {exc}") from exc
        if proc.returncode != 0 or not tmp.exists():
            tmp.unlink(missing_ok=True)
            detail = proc.stderr.decode("utf-8", "replace").strip().splitlines()
            raise DecryptError(detail[-1] if detail else f"{self.binary} exited with {proc.returncode}")
        os.replace(tmp, output)

    def close(self) -> None:
        with self._lock:
            home, self._home = self._home, None
        if home is None:
            return
        try:
            subprocess.run(["gpgconf", "--homedir", str(home), "--kill", "gpg-agent"],
                           capture_output=True, timeout=10)
        except (OSError, subprocess.TimeoutExpired):
            pass
        shutil.rmtree(home, ignore_errors=True)


def decrypt_package(encrypted_path: Path, passphrase: str, decryptor: ArchiveDecryptor) -> Path:
    """Decrypt ``<barcode>.tar.gz.gpg`` next to itself as ``<barcode>.tar.gz``."""
    encrypted_path = Path(encrypted_path)
    if encrypted_path.suffix != ".gpg":
        raise ValueError(f"{encrypted_path.name} does not end in .gpg")
    output = encrypted_path.with_suffix("")
    decryptor.decrypt(encrypted_path, output, passphrase)
    with open(output, "rb") as fh:
        magic = fh.read(2)
    if magic != b"\x1f\x8b":
        output.unlink(missing_ok=True)
        raise DecryptError("decrypted payload is not gzip data")
    return output


def _check_member(member: tarfile.TarInfo) -> None:
    name = PurePosixPath(member.name)
    if name.is_absolute() or member.name.startswith("/"):
        raise UnpackError(f"absolute path in archive: {member.name!r}")
    if ".." in name.parts:
        raise UnpackError(f"path traversal in archive: {member.name!r}")
    if not (member.isfile() or member.isdir()):
        raise UnpackError(f"unsupported member type in archive: {member.name!r}")


def unpack_package(decrypted_path: Path, dest_dir: Path) -> list[tuple[str, int]]:
    """Extract regular files under ``dest_dir``; any unsafe entry fails the whole unpack
    before anything is written."""
    dest_dir = Path(dest_dir)
    try:
        with tarfile.open(decrypted_path, "r:gz") as tar:
            members = tar.getmembers()
            for m in members:
                _check_member(m)
            dest_dir.mkdir(parents=True, exist_ok=True)
            manifest = []
            for m in members:
                target = dest_dir.joinpath(*PurePosixPath(m.name).parts)
                if m.isdir():
                    target.mkdir(parents=True, exist_ok=True)
                    continue
                target.parent.mkdir(parents=True, exist_ok=True)
                with tar.extractfile(m) as src, open(target, "wb") as out:
                    shutil.copyfileobj(src, out, 1 << 20)
                manifest.append((m.name, m.size))
    except (tarfile.TarError, EOFError, OSError) as exc:
        raise UnpackError(f"{Path(decrypted_path).name}: {exc}") from exc
    return manifest


# ---------------------------------------------------------------------------
# the per-volume engine


class Retriever:
    """Shared dependencies plus one method per lifecycle step."""

    def __init__(
        self,
        client: GrinClient,
        store: VolumeStore,
        storage: Storage,
        staging_root: Path | str,
        passphrase: str,
        *,
        decryptor: ArchiveDecryptor | None = None,
        options: SyncOptions = SyncOptions(),
        summary: RunSummary | None = None,
    ):
        self.client = client
        self.store = store
        self.storage = storage
        self.staging_root = Path(staging_root)
        self.staging_root.mkdir(parents=True, exist_ok=True)
        self._passphrase = passphrase
        self.decryptor = decryptor or GpgDecryptor()
        self.options = options
        self.summary = summary or RunSummary("sync")

    def __repr__(self):
        return f"Retriever(staging_root={str(self.staging_root)!r})"

    def _key(self, barcode: str) -> str:
        return package_key(barcode, self.storage.prefix)

    # -- steps ---------------------------------------------------------------

    def probe(self, barcode: str) -> SyncResult | PackageProbe:
        """Decide whether the volume needs a download. Returns a terminal
        result for skips, or the probe to hand to the download step."""
        record = self.store.get(barcode)
        if record is None:
            log.warning("%s: not in the store; run collect first", barcode)
            self.summary.incr("missing")
            return SyncResult(barcode, Outcome.MISSING)
        probe = self.client.probe_package(barcode)
        self.summary.incr("probed")
        if not probe.available:
            log.info("%s: no package available", barcode)
            self.summary.incr("not_available")
            return SyncResult(barcode, Outcome.NOT_AVAILABLE)
        if record.stored_etag == probe.etag:
            log.info("%s: etag unchanged, skipping", barcode)
            self.summary.incr("skipped_identical")
            return SyncResult(barcode, Outcome.SKIPPED_IDENTICAL)
        stored = self.storage.head_artifact(self._key(barcode))
        if stored is not None and stored.metadata.get(ETAG_METADATA_KEY) == probe.etag:
            # the store lost track but the bucket still holds this exact version
            if self.options.extract_marc and record.marc is None:
                self._restore_marc(barcode, stored.key)
            self.store.record_sync(barcode, probe.etag, stored.key)
            log.info("%s: storage already holds etag %s, skipping", barcode, probe.etag)
            self.summary.incr("skipped_identical")
            return SyncResult(barcode, Outcome.SKIPPED_IDENTICAL)
        return probe

    def _restore_marc(self, barcode: str, key: str) -> None:
        """Re-read MARC from the already-stored package; costs storage reads, no GRIN traffic."""
        work = self.staging_root / barcode
        shutil.rmtree(work, ignore_errors=True)
        work.mkdir(parents=True)
        try:
            local = self.storage.get_artifact(key, work / f"{barcode}.tar.gz")
            unpack_package(local, work / "unpacked")
            self.store.record_marc(barcode, extract_marc_from_dir(work / "unpacked"))
        except (StorageError, UnpackError, ExtractionError, OSError) as exc:
            log.warning("%s: could not restore MARC from storage: %s", barcode, exc)
        finally:
            shutil.rmtree(work, ignore_errors=True)

    def download(self, barcode: str) -> FilePackage:
        pkg = FilePackage(barcode, self.staging_root / barcode)
        shutil.rmtree(pkg.staging_dir, ignore_errors=True)
        pkg.staging_dir.mkdir(parents=True)
        try:
            result = self.client.download_package(barcode, pkg.encrypted_path)
        except PackageNotAvailable as exc:
            raise VolumeFailure("NotAvailable", "package vanished between probe and download") from exc
        except IntegrityError as exc:
            raise VolumeFailure("IntegrityError", str(exc)) from exc
        except CredentialError:
            raise
        except GrinError as exc:
            raise VolumeFailure("DownloadError", str(exc)) from exc
        pkg.encrypted_etag = result.etag
        pkg.advance(Lifecycle.DOWNLOADED)
        self.summary.incr("downloaded")
        log.info("%s: downloaded %d bytes", barcode, result.byte_count)
        return pkg

    def decrypt_and_extract(self, pkg: FilePackage) -> FilePackage:
        try:
            pkg.decrypted_path = decrypt_package(pkg.encrypted_path, self._passphrase, self.decryptor)
        except DecryptError as exc:
            raise VolumeFailure("DecryptError", str(exc)) from exc
        finally:
            pkg.encrypted_path.unlink(missing_ok=True)
        pkg.advance(Lifecycle.DECRYPTED)
        self.summary.incr("decrypted")
        if not (self.options.extract_marc or self.options.extract_ocr):
            return pkg
        pkg.unpacked_dir = pkg.staging_dir / "unpacked"
        try:
            unpack_package(pkg.decrypted_path, pkg.unpacked_dir)
        except UnpackError as exc:
            raise VolumeFailure("UnpackError", str(exc)) from exc
        pkg.advance(Lifecycle.UNPACKED)
        if self.options.extract_marc:
            try:
                marc = extract_marc_from_dir(pkg.unpacked_dir)
            except ExtractionError as exc:
                pkg.marc_error = str(exc)
                log.warning("%s: MARC extraction failed: %s", pkg.barcode, exc)
            else:
                self.store.record_marc(pkg.barcode, marc)
        if self.options.extract_ocr:
            try:
                pages, pkg.jsonl_path = collate_ocr(pkg.unpacked_dir, pkg.staging_dir / f"{pkg.barcode}.jsonl")
            except (ExtractionError, OSError) as exc:
                raise VolumeFailure("ExtractError", str(exc)) from exc
            log.info("%s: collated %d OCR pages", pkg.barcode, pages)
        shutil.rmtree(pkg.unpacked_dir, ignore_errors=True)
        self.summary.incr("extracted")
        return pkg

    def upload(self, pkg: FilePackage) -> SyncResult:
        metadata = {ETAG_METADATA_KEY: pkg.encrypted_etag}
        key = self._key(pkg.barcode)
        try:
            if pkg.jsonl_path is not None:
                self.storage.put_artifact(jsonl_key(pkg.barcode, self.storage.prefix), pkg.jsonl_path, metadata)
            # the package carries the skip metadata, so it goes last
            self.storage.put_artifact(key, pkg.decrypted_path, metadata)
        except StorageError as exc:
            raise VolumeFailure("UploadError", str(exc)) from exc
        pkg.advance(Lifecycle.UPLOADED)
        self.summary.incr("uploaded")
        self.store.record_sync(pkg.barcode, pkg.encrypted_etag, key)
        if pkg.marc_error:
            self.store.record_error(pkg.barcode, "ExtractError", pkg.marc_error)
        self.cleanup(pkg)
        log.info("%s: synced (etag %s)", pkg.barcode, pkg.encrypted_etag)
        return SyncResult(pkg.barcode, Outcome.SYNCED)

    def cleanup(self, pkg: FilePackage | str) -> None:
        if isinstance(pkg, str):
            shutil.rmtree(self.staging_root / pkg, ignore_errors=True)
            return
        shutil.rmtree(pkg.staging_dir, ignore_errors=True)
        pkg.advance(Lifecycle.CLEANED_UP)

    def fail(self, barcode: str, failure: VolumeFailure) -> SyncResult:
        self.cleanup(barcode)
        self.summary.incr("failed")
        log.error("%s: %s", barcode, failure)
        try:
            self.store.record_error(barcode, failure.code, failure.message)
        except StoreError as exc:
            log.error("%s: could not record failure: %s", barcode, exc)
        return SyncResult(barcode, Outcome.FAILED, failure.code, failure.message)

    # -- sequential entry point ----------------------------------------------

    def sync_volume(self, barcode: str) -> SyncResult:
        try:
            probed = self.probe(barcode)
            if isinstance(probed, SyncResult):
                return probed
            pkg = self.download(barcode)
            self.decrypt_and_extract(pkg)
            return self.upload(pkg)
        except VolumeFailure as failure:
            return self.fail(barcode, failure)
        except (CredentialError, StoreError):
            self.cleanup(barcode)
            raise
        except GrinError as exc:
            return self.fail(barcode, VolumeFailure(type(exc).__name__, str(exc)))


def sync_volume(retriever: Retriever, barcode: str) -> SyncResult:
    return retriever.sync_volume(barcode)


# ---------------------------------------------------------------------------
# pipeline

_DONE = object()


@dataclass
class PipelineEvent:
    name: str
    barcode: str | None
    at: float
    data: dict = field(default_factory=dict)


class SyncPipeline:
    """HEAD, download, decrypt and upload stages joined by bounded queues.

    Download workers consult the staging monitor before each transfer and
    wait while it signals pause; later stages keep draining so staging frees
    up. A systemic error (credentials, store) stops intake, lets in-flight
    volumes finish, and is re-raised from ``run``.
    """

    def __init__(
        self,
        retriever: Retriever,
        monitor: StagingMonitor,
        *,
        head_workers: int = 3,
        download_workers: int = 4,
        decrypt_workers: int = 2,
        upload_workers: int = 2,
        queue_size: int = 4,
        stop: threading.Event | None = None,
        on_result: Callable[[SyncResult], None] | None = None,
    ):
        self.retriever = retriever
        self.monitor = monitor
        self.workers = {"head": head_workers, "download": download_workers, "decrypt": decrypt_workers, "upload": upload_workers}
        self.queue_size = queue_size
        self.stop = stop or threading.Event()
        self.on_result = on_result
        self.results: list[SyncResult] = []
        self.events: list[PipelineEvent] = []
        self._lock = threading.Lock()
        self._start_lock = threading.Lock()
        self._fatal: BaseException | None = None

    def _event(self, name: str, barcode: str | None = None, **data) -> None:
        with self._lock:
            self.events.append(PipelineEvent(name, barcode, time.monotonic(), data))

    def _finish(self, result: SyncResult) -> None:
        with self._lock:
            self.results.append(result)
        if self.on_result:
            self.on_result(result)

    def _abort(self, exc: BaseException) -> None:
        with self._lock:
            if self._fatal is None:
                self._fatal = exc
        self.stop.set()

    def _wait_for_staging(self, barcode: str) -> bool:
        """Block until staging is below threshold. Returns False when stopping."""
        while True:
            with self._start_lock:
                status = self.monitor.check()
                if status.ok:
                    self._event("download_start", barcode, used_fraction=status.used_fraction)
                    return True
            self._event("staging_paused", barcode, used_fraction=status.used_fraction)
            if self._fatal is not None:
                return False
            time.sleep(min(self.monitor.poll_interval, 1.0) if self.monitor.poll_interval > 0 else 0.01)

    def _stage(self, name: str, inbox: queue.Queue, outbox: queue.Queue | None, work: Callable):
        def loop():
            while True:
                item = inbox.get()
                if item is _DONE:
                    return
                barcode = item if isinstance(item, str) else item.barcode
                try:
                    nxt = work(item)
                except VolumeFailure as failure:
                    self._finish(self.retriever.fail(barcode, failure))
                    continue
                except (CredentialError, StoreError) as exc:
                    self.retriever.cleanup(barcode)
                    self._finish(SyncResult(barcode, Outcome.FAILED, type(exc).__name__, str(exc)))
                    self._abort(exc)
                    continue
                except GrinError as exc:
                    self._finish(self.retriever.fail(barcode, VolumeFailure(type(exc).__name__, str(exc))))
                    continue
                except Exception as exc:  # keep the worker alive; the volume is retried next run
                    log.exception("%s: unexpected error in %s stage", barcode, name)
                    self._finish(self.retriever.fail(barcode, VolumeFailure("InternalError", repr(exc))))
                    continue
                if isinstance(nxt, SyncResult):
                    self._finish(nxt)
                elif outbox is not None:
                    outbox.put(nxt)
        return loop

    def _head(self, barcode: str):
        probed = self.retriever.probe(barcode)
        return probed if isinstance(probed, SyncResult) else barcode

    def _download(self, barcode: str):
        if not self._wait_for_staging(barcode):
            self.retriever.cleanup(barcode)
            return SyncResult(barcode, Outcome.FAILED, "Aborted", "run aborted before download")
        return self.retriever.download(barcode)

    def run(self, barcodes: Iterable[str]) -> list[SyncResult]:
        qs = {n: queue.Queue(self.queue_size) for n in ("head", "download", "decrypt", "upload")}
        order = ["head", "download", "decrypt", "upload"]
        work = {
            "head": self._head,
            "download": self._download,
            "decrypt": self.retriever.decrypt_and_extract,
            "upload": self.retriever.upload,
        }
        threads: dict[str, list[threading.Thread]] = {}
        for i, name in enumerate(order):
            outbox = qs[order[i + 1]] if i + 1 < len(order) else None
            threads[name] = [
                threading.Thread(target=self._stage(name, qs[name], outbox, work[name]), name=f"{name}-{k}", daemon=True)
                for k in range(self.workers[name])
            ]
            for t in threads[name]:
                t.start()
        try:
            for barcode in barcodes:
                if self.stop.is_set():
                    log.info("stop requested; not starting further volumes")
                    break
                qs["head"].put(barcode)
        finally:
            # shut stages down front to back so every queued volume reaches a terminal state
            for name in order:
                for _ in threads[name]:
                    qs[name].put(_DONE)
                for t in threads[name]:
                    t.join()
        if self._fatal is not None:
            raise self._fatal
        return list(self.results)
