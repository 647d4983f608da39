"""Wire formats for GRIN listing-style responses.

Only one codec exists: tab-separated UTF-8 text with a header row and one
record per line. Pagination travels in the ``X-Next-Cursor`` response header
and is echoed back verbatim. A codec for the production GRIN markup would
implement the same ``ListingCodec`` protocol.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Protocol

NEXT_CURSOR_HEADER = "X-Next-Cursor"


class GrinState(str, Enum):
    UNCONVERTED = "UNCONVERTED"
    IN_PROCESS = "IN_PROCESS"
    CONVERTED = "CONVERTED"
    PREVIOUSLY_DOWNLOADED = "PREVIOUSLY_DOWNLOADED"
    FAILED = "FAILED"

    @classmethod
    def from_wire(cls, value: str) -> "GrinState":
        value = value.strip()
        if not value:
            return cls.UNCONVERTED
        return cls(value)

    def to_wire(self) -> str:
        return "" if self is GrinState.UNCONVERTED else self.value


DATE_FIELDS = (
    "scanned_date",
    "converted_date",
    "downloaded_date",
    "processed_date",
    "analyzed_date",
    "ocr_date",
)

LISTING_COLUMNS = ("barcode", "state", "title", "google_books_url") + DATE_FIELDS

CONDITION_FIELDS = (
    "viewability",
    "opted_out",
    "conditions",
    "scannable",
    "tagging",
    "audit",
    "material_error_pct",
    "overall_error_pct",
    "claimed",
    "ocr_analysis_score",
    "ocr_gtd_score",
    "digitization_method",
    "check_in_date",
    "source_library_bibkey",
    "allow_download_updated",
    "viewability_updated",
)

DETAIL_COLUMNS = ("barcode",) + CONDITION_FIELDS


@dataclass
class VolumeListing:
    barcode: str
    grin_state: GrinState = GrinState.UNCONVERTED
    title: str | None = None
    google_books_url: str | None = None
    scanned_date: str | None = None
    converted_date: str | None = None
    downloaded_date: str | None = None
    processed_date: str | None = None
    analyzed_date: str | None = None
    ocr_date: str | None = None
    # columns the codec did not recognise, kept verbatim
    extras: dict[str, str] = field(default_factory=dict)


class CodecError(ValueError):
    pass


def _reader(body: bytes) -> csv.DictReader:
    text = body.decode("utf-8")
    return csv.DictReader(io.StringIO(text, newline=""), delimiter="\t")


def write_tsv(columns: Iterable[str], rows: Iterable[Mapping[str, object]]) -> bytes:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=list(columns), delimiter="\t", lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue().encode("utf-8")


def read_tsv(body: bytes, required: Iterable[str] = ("barcode",)) -> list[dict[str, str]]:
    reader = _reader(body)
    if reader.fieldnames is None:
        if body.strip():
            raise CodecError("missing header row")
        return []
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise CodecError(f"missing columns: {', '.join(missing)}")
    return list(reader)


class ListingCodec(Protocol):
    def decode(self, body: bytes, headers: Mapping[str, str]) -> tuple[list[VolumeListing], str | None]: ...

    def encode(self, listings: Iterable[VolumeListing], next_cursor: str | None) -> tuple[bytes, dict[str, str]]: ...


class TsvListingCodec:
    def decode(self, body, headers):
        listings = []
        seen = set()
        for row in read_tsv(body, ("barcode", "state")):
            barcode = (row.pop("barcode") or "").strip()
            if not barcode:
                raise CodecError("listing row without a barcode")
            if barcode in seen:
                raise CodecError(f"duplicate barcode {barcode!r} in one page")
            seen.add(barcode)
            state = GrinState.from_wire(row.pop("state") or "")
            known = {k: (row.pop(k) or None) for k in LISTING_COLUMNS[2:] if k in row}
            extras = {k: v for k, v in row.items() if k is not None and v}
            listings.append(VolumeListing(barcode=barcode, grin_state=state, extras=extras, **known))
        cursor = headers.get(NEXT_CURSOR_HEADER) or None
        return listings, cursor

    def encode(self, listings, next_cursor):
        listings = list(listings)
        extra_cols = sorted({k for item in listings for k in item.extras})
        rows = []
        for item in listings:
            row = {c: getattr(item, c) for c in LISTING_COLUMNS if c not in ("state",)}
            row["state"] = item.grin_state.to_wire()
            row.update(item.extras)
            rows.append(row)
        headers = {"Content-Type": "text/tab-separated-values; charset=utf-8"}
        if next_cursor:
            headers[NEXT_CURSOR_HEADER] = next_cursor
        return write_tsv(LISTING_COLUMNS + tuple(extra_cols), rows), headers
