"""In-process HTTP double of GRIN.

Serves the wire formats the client speaks, keeps a timestamped request log,
and tracks how many HEAD and GET requests are in flight at once so tests can
assert compliance from the server's side of the connection.

Conversion latency and package retention run on a virtual clock that only
moves when ``advance_time`` is called. The request rate limit uses real
monotonic time because that is what the client's limiter controls.
"""

from __future__ import annotations

import base64
import logging
import sys
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, unquote, urlsplit

from ..protocol.codec import (
    CONDITION_FIELDS,
    DETAIL_COLUMNS,
    GrinState,
    TsvListingCodec,
    VolumeListing,
    write_tsv,
)
from .corpus import Corpus, make_volume

log = logging.getLogger(__name__)

CHUNK = 64 * 1024


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, delta: float) -> float:
        if delta < 0:
            raise ValueError("time only moves forward")
        with self._lock:
            self._now += delta
            return self._now


@dataclass
class RequestRecord:
    seq: int
    arrived: float  # time.monotonic()
    method: str
    kind: str
    path: str
    barcodes: tuple[str, ...]
    status: int = 0


@dataclass
class ComplianceReport:
    rate_violations: list[tuple[float, int]]
    requests_after_queue_full: int
    max_head: int
    max_get: int
    head_limit: int = 3
    get_limit: int = 4

    @property
    def ok(self) -> bool:
        return (
            not self.rate_violations
            and self.requests_after_queue_full == 0
            and self.max_head <= self.head_limit
            and self.max_get <= self.get_limit
        )


def rate_violations(arrivals: list[float], limit: int, window: float = 1.0) -> list[tuple[float, int]]:
    """Windows ``[t, t + window)`` starting at an arrival that hold more than ``limit`` arrivals."""
    arrivals = sorted(arrivals)
    out = []
    j = 0
    for i, start in enumerate(arrivals):
        if j < i:
            j = i
        while j < len(arrivals) and arrivals[j] < start + window:
            j += 1
        if j - i > limit:
            out.append((start, j - i))
    return out


@dataclass
class _Volume:
    barcode: str
    state: GrinState
    latency: float
    fail_reason: str | None
    requested_at: float | None = None
    converted_at: float | None = None
    available_until: float | None = None
    downloaded_at: float | None = None
    timeline: list[tuple[float, str]] = field(default_factory=list)

    def move(self, now: float, state: GrinState) -> None:
        self.state = state
        self.timeline.append((now, state.value))


@dataclass
class _Fault:
    kind: str
    barcode: str | None
    status: int | None
    disconnect_after: int | None
    remaining: int


class _QuietServer(ThreadingHTTPServer):
    def handle_error(self, request, client_address):
        # clients that vanish mid-request (killed, timed out) are routine here
        if isinstance(sys.exc_info()[1], (ConnectionError, TimeoutError)):
            return
        super().handle_error(request, client_address)


class MockGrin:
    """One corpus, one HTTP listener. Use as a context manager or call start/stop."""

    def __init__(self, corpus: Corpus, *, host: str = "127.0.0.1", clock: VirtualClock | None = None):
        self.corpus = corpus
        self.spec = corpus.spec
        self.clock = clock or VirtualClock()
        self.codec = TsvListingCodec()
        self._lock = threading.RLock()
        self._seq = 0
        self.log: list[RequestRecord] = []
        self._recent: deque[float] = deque()
        self._faults: list[_Fault] = []
        self.on_request: Callable[[RequestRecord], None] | None = None
        self.gauges = {"HEAD": 0, "GET": 0}
        self.max_gauges = {"HEAD": 0, "GET": 0}
        self.volumes: dict[str, _Volume] = {}
        for b, v in corpus.volumes.items():
            vol = _Volume(b, v.initial_state, v.latency, v.fail_reason)
            vol.timeline.append((0.0, v.initial_state.value))
            if v.initial_state is GrinState.CONVERTED:
                vol.converted_at = 0.0
                vol.available_until = self.spec.package_retention
            elif v.initial_state is GrinState.PREVIOUSLY_DOWNLOADED:
                vol.downloaded_at = 0.0
                if self.spec.previous_available:
                    vol.converted_at = 0.0
                    vol.available_until = self.spec.package_retention
            self.volumes[b] = vol
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self._host = host

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "MockGrin":
        handler = _make_handler(self)
        self._httpd = _QuietServer((self._host, 0), handler)
        self._httpd.daemon_threads = True
        self._httpd.request_queue_size = 128
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="mock-grin", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    # -- virtual time ---------------------------------------------------------

    def advance_time(self, delta: float) -> None:
        self.clock.advance(delta)
        with self._lock:
            self._apply_transitions()

    def _apply_transitions(self) -> None:
        now = self.clock.now()
        for vol in self.volumes.values():
            if vol.state is GrinState.IN_PROCESS and now >= vol.requested_at + vol.latency:
                ready = vol.requested_at + vol.latency
                if vol.fail_reason:
                    vol.move(ready, GrinState.FAILED)
                else:
                    vol.converted_at = ready
                    vol.available_until = ready + self.spec.package_retention
                    vol.move(ready, GrinState.CONVERTED)
            if vol.available_until is not None and now >= vol.available_until:
                expired_at = vol.available_until
                vol.available_until = None
                if vol.state is GrinState.CONVERTED:
                    vol.move(expired_at, GrinState.PREVIOUSLY_DOWNLOADED if vol.downloaded_at is not None else GrinState.UNCONVERTED)

    def available(self, barcode: str) -> bool:
        vol = self.volumes.get(barcode)
        return vol is not None and vol.available_until is not None and self.clock.now() < vol.available_until

    # -- test controls ---------------------------------------------------------

    def backlog(self) -> int:
        with self._lock:
            return sum(1 for v in self.volumes.values() if v.state is GrinState.IN_PROCESS)

    def states(self) -> Counter:
        with self._lock:
            return Counter(v.state for v in self.volumes.values())

    def set_state(self, barcode: str, state: GrinState, *, available: bool | None = None) -> None:
        """Force a volume into a state, e.g. to pre-fill the conversion backlog."""
        with self._lock:
            vol = self.volumes[barcode]
            now = self.clock.now()
            vol.move(now, state)
            if state is GrinState.IN_PROCESS:
                vol.requested_at = now
            if available is None:
                available = state is GrinState.CONVERTED
            vol.available_until = now + self.spec.package_retention if available else None

    def reconvert(self, barcode: str) -> str:
        """Publish a new package version (new bytes, new etag) and return the etag."""
        with self._lock:
            old = self.corpus.volumes[barcode]
            index = self.spec.barcodes().index(barcode)
            new = make_volume(self.spec, barcode, index, old.initial_state, old.latency, version=old.version + 1)
            self.corpus.volumes[barcode] = new
            self.set_state(barcode, GrinState.CONVERTED, available=True)
            return new.etag

    def inject_status(self, kind: str, status: int, times: int = 1, barcode: str | None = None) -> None:
        with self._lock:
            self._faults.append(_Fault(kind, barcode, status, None, times))

    def inject_disconnect(self, barcode: str, after_bytes: int, times: int = 1) -> None:
        with self._lock:
            self._faults.append(_Fault("package_get", barcode, None, after_bytes, times))

    def _take_fault(self, kind: str, barcode: str | None) -> _Fault | None:
        for f in self._faults:
            if f.remaining > 0 and f.kind == kind and (f.barcode is None or f.barcode == barcode):
                f.remaining -= 1
                return f
        return None

    # -- logging and audit -------------------------------------------------------

    def requests(self, kind: str | None = None, since: int = 0, status: int | None = None) -> list[RequestRecord]:
        with self._lock:
            return [
                r for r in self.log[since:]
                if (kind is None or r.kind == kind) and (status is None or r.status == status)
            ]

    def count(self, kind: str | None = None, since: int = 0, status: int | None = None) -> int:
        return len(self.requests(kind, since, status))

    def mark(self) -> int:
        """Log position to pass as ``since`` for per-run assertions."""
        with self._lock:
            return len(self.log)

    def reset_gauges(self) -> None:
        with self._lock:
            self.max_gauges = {"HEAD": 0, "GET": 0}

    def audit(self, since: int = 0) -> ComplianceReport:
        records = self.requests(since=since)
        conv = [r for r in records if r.kind == "_process"]
        first_full = next((i for i, r in enumerate(conv) if r.status == 429), None)
        after = 0 if first_full is None else len(conv) - first_full - 1
        return ComplianceReport(
            rate_violations=rate_violations([r.arrived for r in records], int(self.spec.rate_burst)),
            requests_after_queue_full=after,
            max_head=self.max_gauges["HEAD"],
            max_get=self.max_gauges["GET"],
        )

    def timeline(self, barcode: str) -> list[tuple[float, str]]:
        with self._lock:
            return list(self.volumes[barcode].timeline)

    # -- request handling ---------------------------------------------------------

    def _admit(self, method: str, kind: str, path: str, barcodes: tuple[str, ...]) -> tuple[RequestRecord, bool]:
        """Log the arrival and decide whether it is within the rate budget."""
        now = time.monotonic()
        window = self.spec.rate_burst / self.spec.rate_limit
        with self._lock:
            self._seq += 1
            rec = RequestRecord(self._seq, now, method, kind, path, barcodes)
            self.log.append(rec)
            while self._recent and self._recent[0] <= now - window:
                self._recent.popleft()
            allowed = len(self._recent) < self.spec.rate_burst
            self._recent.append(now)
            self._apply_transitions()
        hook = self.on_request
        if hook:
            hook(rec)
        return rec, allowed

    def listing_for(self, barcode: str) -> VolumeListing:
        vol = self.volumes[barcode]
        data = self.corpus.volumes[barcode]
        return VolumeListing(
            barcode=barcode,
            grin_state=vol.state,
            title=data.title,
            google_books_url=data.google_books_url,
            scanned_date=data.scanned_date,
            converted_date=_wire_date(vol.converted_at),
            downloaded_date=_wire_date(vol.downloaded_at),
            processed_date=_wire_date(vol.requested_at),
            extras={"shelf_location": f"WID {barcode[-2:]}.{len(data.pages)}"},
        )

    def _list_page(self, query: dict[str, str]) -> tuple[int, bytes, dict[str, str]]:
        try:
            offset = int(base64.urlsafe_b64decode(query["cursor"].encode()).decode().split(":", 1)[1]) if query.get("cursor") else 0
            size = int(query.get("page_size") or self.spec.page_size)
        except (ValueError, IndexError):
            return 400, b"bad cursor\n", {}
        barcodes = sorted(self.volumes)
        page = barcodes[offset : offset + size]
        nxt = None
        if offset + size < len(barcodes):
            nxt = base64.urlsafe_b64encode(f"v1:{offset + size}".encode()).decode()
        with self._lock:
            listings = [self.listing_for(b) for b in page]
        body, headers = self.codec.encode(listings, nxt)
        return 200, body, headers

    def _process(self, barcodes: tuple[str, ...]) -> tuple[int, bytes]:
        rows = []
        full = False
        with self._lock:
            backlog = sum(1 for v in self.volumes.values() if v.state is GrinState.IN_PROCESS)
            now = self.clock.now()
            for b in barcodes:
                vol = self.volumes.get(b)
                if vol is None:
                    rows.append({"barcode": b, "status": "unknown_barcode"})
                elif vol.state is GrinState.IN_PROCESS:
                    rows.append({"barcode": b, "status": "already_in_process"})
                elif vol.state is GrinState.CONVERTED and self.available(b):
                    rows.append({"barcode": b, "status": "already_available"})
                elif full or backlog >= self.spec.conversion_cap:
                    full = True
                    rows.append({"barcode": b, "status": "queue_full"})
                else:
                    vol.requested_at = now
                    vol.available_until = None
                    vol.move(now, GrinState.IN_PROCESS)
                    backlog += 1
                    rows.append({"barcode": b, "status": "success"})
        return (429 if full else 200), write_tsv(("barcode", "status"), rows)

    def _failures(self) -> bytes:
        with self._lock:
            rows = [
                {"barcode": v.barcode, "error": v.fail_reason}
                for v in self.volumes.values()
                if v.state is GrinState.FAILED
            ]
        return write_tsv(("barcode", "error"), rows)

    def _details(self, barcodes: tuple[str, ...]) -> bytes:
        rows = []
        for b in barcodes:
            data = self.corpus.volumes.get(b)
            if data is not None:
                rows.append({"barcode": b, **{f: data.details[f] for f in CONDITION_FIELDS}})
        return write_tsv(DETAIL_COLUMNS, rows)


def _wire_date(t: float | None) -> str | None:
    # virtual seconds since an arbitrary epoch, rendered like GRIN's dates
    if t is None:
        return None
    return time.strftime("%Y/%m/%d %H:%M", time.gmtime(1_600_000_000 + t))


def _classify(path: str, library: str) -> tuple[str, str | None]:
    parts = path.split("/")
    if len(parts) != 4 or parts[1] != "libraries" or unquote(parts[2]) != library:
        return "unknown", None
    leaf = unquote(parts[3])
    if leaf.endswith(".tar.gz.gpg"):
        return "package", leaf[: -len(".tar.gz.gpg")]
    if leaf in ("_all_books", "_process", "_failed", "_book_details"):
        return leaf, None
    return "unknown", None


def _make_handler(mock: MockGrin):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "MockGRIN/1"

        def log_message(self, fmt, *args):
            log.debug("mock: " + fmt, *args)

        def _reply(self, status: int, body: bytes = b"", headers: dict | None = None, *, head: bool = False):
            self.send_response(status)
            for k, v in (headers or {}).items():
                self.send_header(k, v)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if not head:
                self.wfile.write(body)

        def _handle(self, method: str):
            split = urlsplit(self.path)
            query = {k: v[-1] for k, v in parse_qs(split.query).items()}
            kind, barcode = _classify(split.path, mock.spec.library_directory)
            if kind == "package":
                kind = "package_head" if method == "HEAD" else "package_get"
            barcodes = (barcode,) if barcode else tuple(b for b in query.get("barcodes", "").split(",") if b)
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                self.rfile.read(length)
            rec, allowed = mock._admit(method, kind, split.path, barcodes)
            rec.status = self._dispatch(method, kind, barcode, barcodes, query, allowed)

        def _dispatch(self, method, kind, barcode, barcodes, query, allowed) -> int:
            head = method == "HEAD"
            if self.headers.get("Authorization") != f"Bearer {mock.spec.token}":
                self._reply(401, b"unauthorized\n", head=head)
                return 401
            if not allowed:
                self._reply(429, b"rate limit exceeded\n", {"Retry-After": "1"}, head=head)
                return 429
            with mock._lock:
                fault = mock._take_fault(kind, barcode)
            if fault and fault.status:
                self._reply(fault.status, b"injected\n", head=head)
                return fault.status
            expected = {"_all_books": "GET", "_process": "POST", "_failed": "GET", "_book_details": "GET"}
            if kind == "unknown":
                self._reply(404, b"not found\n", head=head)
                return 404
            if kind in expected and method != expected[kind]:
                self._reply(405, b"method not allowed\n", head=head)
                return 405
            if kind == "_all_books":
                status, body, headers = mock._list_page(query)
                self._reply(status, body, headers)
                return status
            if kind == "_process":
                status, body = mock._process(barcodes)
                self._reply(status, body, {"Content-Type": "text/tab-separated-values"})
                return status
            if kind == "_failed":
                self._reply(200, mock._failures())
                return 200
            if kind == "_book_details":
                self._reply(200, mock._details(barcodes))
                return 200
            return self._package(method, barcode, fault)

        def _package(self, method: str, barcode: str, fault: _Fault | None) -> int:
            gauge = method
            with mock._lock:
                mock.gauges[gauge] += 1
                mock.max_gauges[gauge] = max(mock.max_gauges[gauge], mock.gauges[gauge])
                served = mock.available(barcode)
                # freeze the bytes for this exchange even if a new version is published mid-stream
                data = mock.corpus.volumes[barcode].encrypted if served else None
                etag = mock.corpus.volumes[barcode].etag if served else None
            released = False

            def release():
                nonlocal released
                if not released:
                    with mock._lock:
                        mock.gauges[gauge] -= 1
                    released = True

            try:
                if data is None:
                    self.send_response(404)
                    self.send_header("Content-Length", "0")
                    release()
                    self.end_headers()
                    return 404
                self.send_response(200)
                self.send_header("Content-Type", "application/pgp-encrypted")
                self.send_header("Content-Length", str(len(data)))
                self.send_header("ETag", etag)
                if method == "HEAD":
                    release()
                    self.end_headers()
                    return 200
                self.end_headers()
                if fault and fault.disconnect_after is not None:
                    self.wfile.write(data[: fault.disconnect_after])
                    self.wfile.flush()
                    release()
                    self.close_connection = True
                    self.connection.shutdown(2)
                    return 200
                for i in range(0, len(data), CHUNK):
                    end = i + CHUNK
                    if end >= len(data):
                        release()
                    self.wfile.write(data[i:end])
                with mock._lock:
                    vol = mock.volumes[barcode]
                    if vol.downloaded_at is None:
                        vol.downloaded_at = mock.clock.now()
                return 200
            finally:
                release()

        def do_GET(self):
            self._handle("GET")

        def do_HEAD(self):
            self._handle("HEAD")

        def do_POST(self):
            self._handle("POST")

    return Handler
