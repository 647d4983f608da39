"""Run configuration: an INI file in the config directory plus CLI overrides.

Secrets are never stored in ``RunConfig``; it holds references (an
environment variable name and a file path) that are resolved on use.

Example ``~/.config/grin-transfer/config.ini``::

    [grin]
    library_directory = Harvard

    [storage]
    backend = local
    root = /srv/grin/storage

The bearer token lives in ``token`` and the decryption passphrase in
``passphrase`` next to the INI file, or in ``GRIN_TRANSFER_TOKEN`` and
``GRIN_TRANSFER_PASSPHRASE``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .protocol import DEFAULT_BASE_URL, RateBudget

DEFAULT_CONFIG_DIR = Path("~/.config/grin-transfer")
CONFIG_FILENAME = "config.ini"
TOKEN_ENV = "GRIN_TRANSFER_TOKEN"
PASSPHRASE_ENV = "GRIN_TRANSFER_PASSPHRASE"
MAX_HEAD_WORKERS = 3
MAX_DOWNLOAD_WORKERS = 4


class ConfigError(Exception):
    def __init__(self, parameter: str, message: str):
        super().__init__(f"{parameter}: {message}")
        self.parameter = parameter


@dataclass(frozen=True)
class SecretRef:
    """Where a secret comes from. The environment variable wins over the file."""

    name: str
    env: str
    path: Path

    def resolve(self) -> str:
        value = os.environ.get(self.env)
        if value:
            return value
        try:
            value = self.path.read_text(encoding="utf-8").strip()
        except FileNotFoundError:
            raise ConfigError(self.name, f"set {self.env} or create {self.path}") from None
        except OSError as exc:
            raise ConfigError(self.name, f"cannot read {self.path}: {exc.strerror}") from None
        if not value:
            raise ConfigError(self.name, f"{self.path} is empty")
        return value

    def __repr__(self):
        return f"SecretRef({self.name!r}, env={self.env!r}, path={str(self.path)!r})"


@dataclass(frozen=True)
class StorageRef:
    backend: str = "local"  # "local" or "s3"
    root: Path | None = None
    bucket: str | None = None
    prefix: str = ""
    endpoint_url: str | None = None
    part_size_mib: int = 64
    max_concurrency: int = 4

    def open(self):
        from .storage import LocalStorage, S3Storage

        if self.backend == "local":
            return LocalStorage(self.root, self.prefix)
        return S3Storage(
            self.bucket,
            self.prefix,
            endpoint_url=self.endpoint_url,
            part_size=self.part_size_mib << 20,
            max_concurrency=self.max_concurrency,
        )


@dataclass(frozen=True)
class RunConfig:
    library_directory: str
    credentials_ref: SecretRef
    passphrase_ref: SecretRef
    storage: StorageRef
    grin_base_url: str = DEFAULT_BASE_URL
    store_path: Path = Path("grin-transfer.db")
    staging_root: Path = Path("staging")
    staging_threshold: float = 0.90
    staging_capacity_bytes: int | None = None
    staging_poll_interval: float = 5.0
    rate: RateBudget = field(default_factory=RateBudget)
    head_workers: int = 3
    download_workers: int = 4
    decrypt_workers: int = 2
    upload_workers: int = 2
    accept_throttling_risk: bool = False
    conversion_cap_hint: int = 50_000
    conversion_batch: int = 100
    page_size: int | None = None
    extract_marc: bool = True
    extract_ocr: bool = True
    lock_stale_after: float = 24 * 3600.0
    snapshot_keep: int = 5
    snapshot_every: float = 6 * 3600.0

    def __post_init__(self):
        if not self.library_directory:
            raise ConfigError("library_directory", "must be set")
        if not 1 <= self.head_workers <= MAX_HEAD_WORKERS:
            raise ConfigError("head_workers", f"must be between 1 and {MAX_HEAD_WORKERS}")
        if self.download_workers < 1:
            raise ConfigError("download_workers", "must be at least 1")
        if self.download_workers > MAX_DOWNLOAD_WORKERS and not self.accept_throttling_risk:
            raise ConfigError(
                "download_workers",
                f"more than {MAX_DOWNLOAD_WORKERS} needs accept_throttling_risk = true",
            )
        if not 0 < self.staging_threshold <= 1:
            raise ConfigError("staging_threshold", "must be a fraction in (0, 1]")
        if self.decrypt_workers < 1 or self.upload_workers < 1:
            raise ConfigError("decrypt_workers", "worker counts must be at least 1")
        if self.storage.backend not in ("local", "s3"):
            raise ConfigError("storage.backend", f"unknown backend {self.storage.backend!r}")
        if self.storage.backend == "local" and self.storage.root is None:
            raise ConfigError("storage.root", "required for the local backend")
        if self.storage.backend == "s3" and not self.storage.bucket:
            raise ConfigError("storage.bucket", "required for the s3 backend")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _get(cp: configparser.ConfigParser, section: str, key: str, kind=str, default=None):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}") from None


def load_config(config_dir: Path | str | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read ``config.ini`` from ``config_dir`` and apply ``overrides`` (None values ignored)."""
    config_dir = Path(config_dir or DEFAULT_CONFIG_DIR).expanduser()
    path = config_dir / CONFIG_FILENAME
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"{path} not found") from None
    except configparser.Error as exc:
        raise ConfigError("config", f"{path}: {exc}") from None

    def rel(p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p).expanduser()
        return p if p.is_absolute() else config_dir / p

    library = _get(cp, "grin", "library_directory")
    if not library:
        raise ConfigError("library_directory", f"missing from [grin] in {path}")
    storage = StorageRef(
        backend=_get(cp, "storage", "backend", default="local"),
        root=rel(_get(cp, "storage", "root")),
        bucket=_get(cp, "storage", "bucket"),
        prefix=_get(cp, "storage", "prefix", default=""),
        endpoint_url=_get(cp, "storage", "endpoint_url"),
        part_size_mib=_get(cp, "storage", "part_size_mib", int, 64),
        max_concurrency=_get(cp, "storage", "max_concurrency", int, 4),
    )
    values: dict[str, Any] = dict(
        library_directory=library,
        credentials_ref=SecretRef("token", TOKEN_ENV, rel(_get(cp, "grin", "token_file", default="token"))),
        passphrase_ref=SecretRef("passphrase", PASSPHRASE_ENV, rel(_get(cp, "grin", "passphrase_file", default="passphrase"))),
        storage=storage,
        grin_base_url=_get(cp, "grin", "base_url", default=DEFAULT_BASE_URL),
        store_path=rel(_get(cp, "paths", "store", default="grin-transfer.db")),
        staging_root=rel(_get(cp, "paths", "staging", default="staging")),
        rate=RateBudget(_get(cp, "grin", "max_requests_per_second", float, 5.0), _get(cp, "grin", "burst", int, 5)),
    )
    for key, kind in (
        ("staging_threshold", float), ("staging_capacity_bytes", int), ("staging_poll_interval", float),
        ("head_workers", int), ("download_workers", int), ("decrypt_workers", int), ("upload_workers", int),
        ("accept_throttling_risk", bool), ("conversion_cap_hint", int), ("conversion_batch", int),
        ("page_size", int), ("extract_marc", bool), ("extract_ocr", bool), ("lock_stale_after", float),
        ("snapshot_keep", int), ("snapshot_every", float),
    ):
        v = _get(cp, "sync", key, kind)
        if v is not None:
            values[key] = v
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
