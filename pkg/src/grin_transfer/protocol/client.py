"""Typed gateway to a GRIN server (real or mock)."""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Mapping, Protocol, Sequence
from urllib.parse import quote

import requests
from requests.adapters import HTTPAdapter

from .codec import CONDITION_FIELDS, ListingCodec, TsvListingCodec, VolumeListing, read_tsv
from .limiter import RateLimiter, RetryPolicy

log = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://books.google.com"
DEFAULT_DETAIL_BATCH = 50
UNKNOWN = "unknown"


class GrinError(Exception):
    """Base class for protocol failures."""


class CredentialError(GrinError):
    """The server rejected our credentials; the run must stop."""


class TransientError(GrinError):
    """Throttling, server or network failures that outlasted the retry budget."""


class IntegrityError(GrinError):
    """A downloaded payload does not match what the server announced."""


class PackageNotAvailable(GrinError):
    """No file package is currently served for the barcode."""


class EndpointKind(Enum):
    ALL_BOOKS_PAGE = "_all_books"
    CONVERSION_REQUEST = "_process"
    PACKAGE_HEAD = "package_head"
    PACKAGE_GET = "package_get"
    FAILURES_PAGE = "_failed"
    BOOK_DETAIL = "_book_details"


@dataclass(frozen=True)
class Endpoint:
    library_directory: str
    kind: EndpointKind
    parameters: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.library_directory:
            raise ValueError("library_directory must be non-empty")

    def path(self) -> str:
        root = f"/libraries/{quote(self.library_directory, safe='')}"
        if self.kind in (EndpointKind.PACKAGE_HEAD, EndpointKind.PACKAGE_GET):
            return f"{root}/{quote(self.parameters['barcode'], safe='')}.tar.gz.gpg"
        return f"{root}/{self.kind.value}"

    def query(self) -> dict[str, str]:
        if self.kind in (EndpointKind.PACKAGE_HEAD, EndpointKind.PACKAGE_GET):
            return {}
        return dict(self.parameters)


class CredentialProvider(Protocol):
    def bearer_token(self) -> str: ...


class StaticTokenProvider:
    def __init__(self, token: str):
        self._token = token

    def bearer_token(self) -> str:
        return self._token

    def __repr__(self):
        return "StaticTokenProvider(<redacted>)"


@dataclass(frozen=True)
class PackageProbe:
    barcode: str
    available: bool
    etag: str | None = None
    content_length: int | None = None

    def __post_init__(self):
        if self.available and not self.etag:
            raise ValueError("an available package must carry an etag")


@dataclass(frozen=True)
class ConversionResult:
    accepted: tuple[str, ...]
    queue_full: bool

    @property
    def count(self) -> int:
        return len(self.accepted)


@dataclass(frozen=True)
class DownloadResult:
    path: Path
    etag: str
    byte_count: int


def validate_barcode(barcode: str) -> str:
    if not barcode or any(c.isspace() for c in barcode) or "/" in barcode:
        raise ValueError(f"invalid barcode {barcode!r}")
    return barcode


class GrinClient:
    """All GRIN traffic goes through here, and through one shared ``RateLimiter``.

    Safe to share across worker threads. HEAD and GET concurrency are capped by
    semaphores independently of how many workers the caller runs.
    """

    def __init__(
        self,
        base_url: str,
        library_directory: str,
        credentials: CredentialProvider,
        *,
        limiter: RateLimiter | None = None,
        retry: RetryPolicy = RetryPolicy(),
        codec: ListingCodec | None = None,
        head_concurrency: int = 3,
        get_concurrency: int = 4,
        detail_batch_limit: int = DEFAULT_DETAIL_BATCH,
        timeout: float = 60.0,
        chunk_size: int = 1 << 16,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        if not library_directory:
            raise ValueError("library_directory must be non-empty")
        self.base_url = base_url.rstrip("/")
        self.library_directory = library_directory
        self.credentials = credentials
        self.limiter = limiter or RateLimiter()
        self.retry = retry
        self.codec = codec or TsvListingCodec()
        self.detail_batch_limit = detail_batch_limit
        self.timeout = timeout
        self.chunk_size = chunk_size
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._head_slots = threading.BoundedSemaphore(head_concurrency)
        self._get_slots = threading.BoundedSemaphore(get_concurrency)
        self._local = threading.local()
        self._pool_size = max(head_concurrency + get_concurrency, 10)

    # -- plumbing ---------------------------------------------------------

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            adapter = HTTPAdapter(pool_connections=2, pool_maxsize=self._pool_size, max_retries=0)
            session.mount("http://", adapter)
            session.mount("https://", adapter)
            self._local.session = session
        return session

    def endpoint(self, kind: EndpointKind, **params: str) -> Endpoint:
        return Endpoint(self.library_directory, kind, params)

    def url(self, endpoint: Endpoint) -> str:
        return self.base_url + endpoint.path()

    def _backoff(self, attempt: int, reason: str) -> None:
        if attempt >= self.retry.max_attempts:
            raise TransientError(f"giving up after {attempt} attempts: {reason}")
        delay = self.retry.delay(attempt, self._rng)
        log.warning("GRIN request failed (%s); retry %d in %.2fs", reason, attempt, delay)
        self._sleep(delay)

    def _send(self, method: str, endpoint: Endpoint, *, stream: bool = False, allow_429: bool = False):
        """One logical request with retry. The permit covers a single exchange
        up to the response headers."""
        attempt = 0
        while True:
            attempt += 1
            headers = {"Authorization": f"Bearer {self.credentials.bearer_token()}"}
            try:
                with self.limiter.permit():
                    resp = self._session().request(
                        method,
                        self.url(endpoint),
                        params=endpoint.query() or None,
                        headers=headers,
                        stream=stream,
                        timeout=self.timeout,
                    )
            except (requests.ConnectionError, requests.Timeout) as exc:
                self._backoff(attempt, f"{type(exc).__name__}")
                continue
            status = resp.status_code
            if status in (401, 403):
                resp.close()
                raise CredentialError(f"GRIN answered {status} for {endpoint.path()}")
            if status == 429 and allow_429:
                return resp
            if status == 429 or status >= 500:
                resp.close()
                self._backoff(attempt, f"HTTP {status}")
                continue
            return resp

    # -- operations -------------------------------------------------------

    def list_books_page(self, cursor: str | None = None, page_size: int | None = None) -> tuple[list[VolumeListing], str | None]:
        params = {}
        if cursor:
            params["cursor"] = cursor
        if page_size:
            params["page_size"] = str(page_size)
        resp = self._send("GET", self.endpoint(EndpointKind.ALL_BOOKS_PAGE, **params))
        resp.raise_for_status()
        return self.codec.decode(resp.content, resp.headers)

    def iter_books(self, page_size: int | None = None) -> Iterator[VolumeListing]:
        cursor = None
        while True:
            listings, cursor = self.list_books_page(cursor, page_size)
            yield from listings
            if cursor is None:
                return

    def request_conversion(self, barcodes: Sequence[str]) -> ConversionResult:
        """Submit a batch. A 429 means the server-side queue is full; whatever
        the server accepted before filling up is reported in ``accepted``."""
        if not barcodes:
            raise ValueError("request_conversion needs at least one barcode")
        for b in barcodes:
            validate_barcode(b)
        resp = self._send(
            "POST",
            self.endpoint(EndpointKind.CONVERSION_REQUEST, barcodes=",".join(barcodes)),
            allow_429=True,
        )
        queue_full = resp.status_code == 429
        if not queue_full:
            resp.raise_for_status()
        accepted = []
        if resp.content.strip():
            for row in read_tsv(resp.content, ("barcode", "status")):
                if row["status"].strip().lower() in ("success", "already_in_process"):
                    accepted.append(row["barcode"])
        elif not queue_full:
            accepted = list(barcodes)
        return ConversionResult(tuple(accepted), queue_full)

    def probe_package(self, barcode: str) -> PackageProbe:
        validate_barcode(barcode)
        with self._head_slots:
            resp = self._send("HEAD", self.endpoint(EndpointKind.PACKAGE_HEAD, barcode=barcode))
            resp.close()
        if resp.status_code == 404:
            return PackageProbe(barcode, available=False)
        resp.raise_for_status()
        length = resp.headers.get("Content-Length")
        return PackageProbe(
            barcode,
            available=True,
            etag=resp.headers.get("ETag"),
            content_length=int(length) if length is not None else None,
        )

    def download_package(self, barcode: str, destination: Path) -> DownloadResult:
        """Stream the encrypted package to ``destination``. Interrupted transfers
        restart from byte 0; nothing is left at ``destination`` on failure."""
        validate_barcode(barcode)
        destination = Path(destination)
        endpoint = self.endpoint(EndpointKind.PACKAGE_GET, barcode=barcode)
        attempt = 0
        with self._get_slots:
            while True:
                attempt += 1
                resp = self._send("GET", endpoint, stream=True)
                try:
                    if resp.status_code == 404:
                        raise PackageNotAvailable(barcode)
                    resp.raise_for_status()
                    etag = resp.headers.get("ETag")
                    expected = resp.headers.get("Content-Length")
                    count = 0
                    with open(destination, "wb") as fh:
                        for chunk in resp.iter_content(self.chunk_size):
                            fh.write(chunk)
                            count += len(chunk)
                except (requests.ConnectionError, requests.exceptions.ChunkedEncodingError, requests.Timeout) as exc:
                    _unlink(destination)
                    self._backoff(attempt, f"download interrupted: {type(exc).__name__}")
                    continue
                except BaseException:
                    _unlink(destination)
                    raise
                finally:
                    resp.close()
                if not etag:
                    _unlink(destination)
                    raise IntegrityError(f"{barcode}: response carried no ETag")
                if expected is not None and int(expected) != count:
                    _unlink(destination)
                    raise IntegrityError(f"{barcode}: received {count} bytes, expected {expected}")
                return DownloadResult(destination, etag, count)

    def fetch_failures(self) -> list[tuple[str, str]]:
        resp = self._send("GET", self.endpoint(EndpointKind.FAILURES_PAGE))
        resp.raise_for_status()
        return [(r["barcode"], r.get("error") or "") for r in read_tsv(resp.content, ("barcode", "error"))]

    def fetch_book_details(self, barcodes: Sequence[str]) -> dict[str, dict[str, str | None] | str]:
        """Condition fields per barcode; barcodes the server does not know map to ``UNKNOWN``."""
        if not barcodes:
            raise ValueError("fetch_book_details needs at least one barcode")
        if len(barcodes) > self.detail_batch_limit:
            raise ValueError(f"batch of {len(barcodes)} exceeds the limit of {self.detail_batch_limit}")
        for b in barcodes:
            validate_barcode(b)
        resp = self._send("GET", self.endpoint(EndpointKind.BOOK_DETAIL, barcodes=",".join(barcodes)))
        resp.raise_for_status()
        found = {}
        for row in read_tsv(resp.content, ("barcode",)):
            found[row["barcode"]] = {f: (row.get(f) or None) for f in CONDITION_FIELDS}
        return {b: found.get(b, UNKNOWN) for b in barcodes}


def _unlink(path: Path) -> None:
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass
