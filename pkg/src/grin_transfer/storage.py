"""Final storage: a local directory tree or an S3-compatible bucket.

Both backends attach ``grin_encrypted_etag`` to the stored package so a sync
can be skipped even when the tracking database is gone. On the filesystem the
metadata lives in a ``<key>.meta`` sidecar of ``key=value`` lines.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

log = logging.getLogger(__name__)

ETAG_METADATA_KEY = "grin_encrypted_etag"
# WSGI front ends (and nginx by default) drop header names containing "_", so
# S3 uploads also carry a hyphenated copy that reads map back
_METADATA_ALIASES = {ETAG_METADATA_KEY.replace("_", "-"): ETAG_METADATA_KEY}
MiB = 1 << 20
_PARTIAL = ".partial"


class StorageError(Exception):
    pass


@dataclass(frozen=True)
class StoredObject:
    key: str
    size: int
    metadata: dict[str, str] = field(default_factory=dict)
    checksum: str | None = None


def package_key(barcode: str, prefix: str = "") -> str:
    return _join(prefix, f"{barcode}.tar.gz")


def jsonl_key(barcode: str, prefix: str = "") -> str:
    return _join(prefix, f"{barcode}.jsonl")


def _join(prefix: str, name: str) -> str:
    prefix = prefix.strip("/")
    return f"{prefix}/{name}" if prefix else name


class Storage(Protocol):
    prefix: str

    def put_artifact(self, key: str, source: Path, metadata: Mapping[str, str] | None = None) -> StoredObject: ...

    def head_artifact(self, key: str) -> StoredObject | None: ...

    def get_artifact(self, key: str, destination: Path) -> Path: ...


class LocalStorage:
    def __init__(self, root: Path | str, prefix: str = ""):
        self.root = Path(root)
        self.prefix = prefix

    def _path(self, key: str) -> Path:
        path = (self.root / key).resolve()
        if self.root.resolve() not in path.parents:
            raise StorageError(f"key {key!r} escapes the storage root")
        return path

    def package_key(self, barcode: str) -> str:
        return package_key(barcode, self.prefix)

    def jsonl_key(self, barcode: str) -> str:
        return jsonl_key(barcode, self.prefix)

    def put_artifact(self, key, source, metadata=None):
        target = self._path(key)
        target.parent.mkdir(parents=True, exist_ok=True)
        meta_path = target.with_name(target.name + ".meta")
        digest = hashlib.sha256()
        size = 0
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=_PARTIAL)
        try:
            with os.fdopen(fd, "wb") as out, open(source, "rb") as src:
                for chunk in iter(lambda: src.read(MiB), b""):
                    out.write(chunk)
                    digest.update(chunk)
                    size += len(chunk)
                out.flush()
                os.fsync(out.fileno())
            # a crash between these steps leaves no sidecar or an old one, which
            # only forces a re-sync; it never vouches for the wrong payload
            meta_path.unlink(missing_ok=True)
            os.replace(tmp, target)
            if metadata:
                _atomic_write_text(meta_path, "".join(f"{k}={v}\n" for k, v in metadata.items()))
        except OSError as exc:
            Path(tmp).unlink(missing_ok=True)
            raise StorageError(f"writing {key}: {exc}") from exc
        return StoredObject(key, size, dict(metadata or {}), digest.hexdigest())

    def head_artifact(self, key):
        target = self._path(key)
        try:
            size = target.stat().st_size
        except FileNotFoundError:
            return None
        meta = {}
        try:
            for line in target.with_name(target.name + ".meta").read_text(encoding="utf-8").splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k] = v
        except FileNotFoundError:
            pass
        return StoredObject(key, size, meta)

    def get_artifact(self, key, destination):
        target = self._path(key)
        if not target.exists():
            raise StorageError(f"{key} not found")
        Path(destination).write_bytes(target.read_bytes())
        return Path(destination)

    def sweep_partials(self) -> int:
        """Delete temp files left by a killed writer. Only safe under the session lock."""
        if not self.root.exists():
            return 0
        stale = [p for p in self.root.rglob(f".*{_PARTIAL}") if p.is_file()]
        for p in stale:
            p.unlink(missing_ok=True)
        if stale:
            log.info("removed %d partial uploads from %s", len(stale), self.root)
        return len(stale)

    def list_keys(self) -> list[str]:
        return sorted(
            str(p.relative_to(self.root)) for p in self.root.rglob("*")
            if p.is_file() and not p.name.endswith(".meta") and not p.name.startswith(".")
        )


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=_PARTIAL)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


class S3Storage:
    """S3-compatible bucket (path-style addressing supported via ``endpoint_url``)."""

    def __init__(
        self,
        bucket: str,
        prefix: str = "",
        *,
        endpoint_url: str | None = None,
        client=None,
        part_size: int = 64 * MiB,
        multipart_threshold: int | None = None,
        max_concurrency: int = 4,
        part_attempts: int = 3,
        **client_kwargs,
    ):
        if client is None:
            import boto3
            from botocore.config import Config

            client = boto3.client(
                "s3",
                endpoint_url=endpoint_url,
                config=Config(s3={"addressing_style": "path"}, retries={"max_attempts": 1}),
                **client_kwargs,
            )
        if part_size < 5 * MiB:
            raise ValueError("S3 parts must be at least 5 MiB")
        self.client = client
        self.bucket = bucket
        self.prefix = prefix
        self.part_size = part_size
        self.multipart_threshold = multipart_threshold or part_size
        self.max_concurrency = max_concurrency
        self.part_attempts = part_attempts

    def package_key(self, barcode: str) -> str:
        return package_key(barcode, self.prefix)

    def jsonl_key(self, barcode: str) -> str:
        return jsonl_key(barcode, self.prefix)

    def put_artifact(self, key, source, metadata=None):
        source = Path(source)
        size = source.stat().st_size
        metadata = dict(metadata or {})
        wire = dict(metadata)
        wire.update({alias: metadata[key] for alias, key in _METADATA_ALIASES.items() if key in metadata})
        if size < self.multipart_threshold:
            body = source.read_bytes()
            resp = self._with_retry(
                lambda: self.client.put_object(Bucket=self.bucket, Key=key, Body=body, Metadata=wire), key
            )
            return StoredObject(key, size, metadata, resp.get("ETag"))
        obj = self._multipart(key, source, size, wire)
        return StoredObject(key, size, metadata, obj.checksum)

    def _with_retry(self, fn, what: str):
        last = None
        for attempt in range(1, self.part_attempts + 1):
            try:
                return fn()
            except Exception as exc:  # botocore raises a zoo of types
                last = exc
                log.warning("upload of %s failed (attempt %d/%d): %s", what, attempt, self.part_attempts, exc)
        raise StorageError(f"upload of {what} failed after {self.part_attempts} attempts: {last}") from last

    def _multipart(self, key: str, source: Path, size: int, metadata: dict[str, str]) -> StoredObject:
        upload_id = self.client.create_multipart_upload(Bucket=self.bucket, Key=key, Metadata=metadata)["UploadId"]
        n_parts = (size + self.part_size - 1) // self.part_size
        file_lock = threading.Lock()

        def read_part(number: int) -> bytes:
            with file_lock, open(source, "rb") as fh:
                fh.seek((number - 1) * self.part_size)
                return fh.read(self.part_size)

        def send(number: int) -> dict:
            def attempt():
                body = read_part(number)
                r = self.client.upload_part(Bucket=self.bucket, Key=key, UploadId=upload_id, PartNumber=number, Body=body)
                return {"PartNumber": number, "ETag": r["ETag"]}
            return self._with_retry(attempt, f"{key} part {number}")

        try:
            with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
                parts = list(pool.map(send, range(1, n_parts + 1)))
            resp = self.client.complete_multipart_upload(
                Bucket=self.bucket, Key=key, UploadId=upload_id, MultipartUpload={"Parts": parts}
            )
        except BaseException:
            try:
                self.client.abort_multipart_upload(Bucket=self.bucket, Key=key, UploadId=upload_id)
            except Exception as exc:
                log.error("could not abort multipart upload %s for %s: %s", upload_id, key, exc)
            raise
        return StoredObject(key, size, metadata, resp.get("ETag"))

    def head_artifact(self, key):
        from botocore.exceptions import ClientError

        try:
            resp = self.client.head_object(Bucket=self.bucket, Key=key)
        except ClientError as exc:
            if exc.response.get("Error", {}).get("Code") in ("404", "NoSuchKey", "NotFound"):
                return None
            raise
        meta = dict(resp.get("Metadata", {}))
        for alias, name in _METADATA_ALIASES.items():
            if alias in meta:
                meta.setdefault(name, meta.pop(alias))
        return StoredObject(key, resp["ContentLength"], meta, resp.get("ETag"))

    def get_artifact(self, key, destination):
        self.client.download_file(self.bucket, key, str(destination))
        return Path(destination)
