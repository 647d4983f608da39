"""Content extraction from an unpacked file package.

Package layout assumed here (isolated so a different layout only touches
this module and the fixture generator):

    METS.xml            METS document with a MARCXML record in a dmdSec
    ocr/<digits>.txt    one OCR text file per page
    images/<digits>.*   page scans (ignored)
"""

from __future__ import annotations

import json
import logging
import os
import re
import xml.etree.ElementTree as ET
from pathlib import Path

from .store import MarcMetadata

log = logging.getLogger(__name__)

MARC_NS = "http://www.loc.gov/MARC21/slim"
METS_FILENAME = "METS.xml"
OCR_DIR = "ocr"
_PAGE_RE = re.compile(r"(\d+)")

# ISBD punctuation trailing a subfield
_TRAILING = " /:;,=."


class ExtractionError(Exception):
    pass


def _clean(text: str | None) -> str | None:
    if text is None:
        return None
    text = " ".join(text.split()).rstrip(_TRAILING).strip()
    return text or None


def _subfields(field: ET.Element, codes: str | None = None) -> list[str]:
    out = []
    for sf in field.findall(f"{{{MARC_NS}}}subfield"):
        if codes is None or sf.get("code") in codes:
            v = _clean(sf.text)
            if v:
                out.append(v)
    return out


def _find_record(root: ET.Element) -> ET.Element:
    if root.tag == f"{{{MARC_NS}}}record":
        return root
    record = root.find(f".//{{{MARC_NS}}}record")
    if record is None:
        raise ExtractionError("no MARC21 record found in METS document")
    return record


def extract_marc(mets_document: str | bytes) -> MarcMetadata:
    """Map the embedded MARC record onto ``MarcMetadata``. Pure function of the text."""
    try:
        root = ET.fromstring(mets_document)
    except ET.ParseError as exc:
        raise ExtractionError(f"malformed METS XML: {exc}") from exc
    record = _find_record(root)

    controls = {cf.get("tag"): cf.text or "" for cf in record.findall(f"{{{MARC_NS}}}controlfield")}
    datafields: dict[str, list[ET.Element]] = {}
    for df in record.findall(f"{{{MARC_NS}}}datafield"):
        datafields.setdefault(df.get("tag"), []).append(df)

    def first(tag: str, codes: str) -> str | None:
        for df in datafields.get(tag, []):
            vals = _subfields(df, codes)
            if vals:
                return " ".join(vals)
        return None

    def each(tags: tuple[str, ...], codes: str | None, sep: str = " ") -> list[str]:
        out = []
        for df in record.findall(f"{{{MARC_NS}}}datafield"):
            if df.get("tag") in tags:
                vals = _subfields(df, codes)
                if vals:
                    out.append(sep.join(vals))
        return out

    m = MarcMetadata()
    m.control_number = _clean(controls.get("001"))
    f008 = controls.get("008", "")
    if len(f008) >= 15:
        m.date_type = _clean(f008[6]) if f008[6].strip() else None
        m.date_1 = f008[7:11].strip() or None
        m.date_2 = f008[11:15].strip() or None
    if len(f008) >= 38:
        m.language = f008[35:38].strip() or None
    m.lccn = first("010", "a")
    m.lc_call_number = first("050", "ab") or first("090", "ab")
    m.isbns = each(("020",), "a")
    m.oclc_numbers = [_oclc(v) for v in each(("035",), "a") if v.startswith("(OCoLC)")]
    title_fields = datafields.get("245", [])
    if title_fields:
        m.title = first("245", "a")
        m.subtitles = _subfields(title_fields[0], "b")
    m.personal_authors = each(("100",), "aqd")
    m.corporate_authors = each(("110",), "ab")
    m.meeting_authors = each(("111",), "acd")
    m.subjects = each(("600", "610", "611", "630", "650", "651"), "abxyzv", sep=" -- ")
    m.genres = each(("655",), "a")
    m.general_notes = each(("500",), "a")
    return m


def _oclc(value: str) -> str:
    value = value[len("(OCoLC)"):]
    for prefix in ("ocm", "ocn", "on"):
        if value.startswith(prefix):
            value = value[len(prefix):]
    return value.strip()


def extract_marc_from_dir(unpacked_dir: Path) -> MarcMetadata:
    path = Path(unpacked_dir) / METS_FILENAME
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ExtractionError(f"cannot read {path.name}: {exc.strerror}") from exc
    return extract_marc(data)


def page_files(unpacked_dir: Path) -> list[Path]:
    """OCR page files ordered by the numeric component of their names."""
    ocr_dir = Path(unpacked_dir) / OCR_DIR
    if not ocr_dir.is_dir():
        return []
    pages = []
    for entry in ocr_dir.iterdir():
        match = _PAGE_RE.search(entry.stem)
        if entry.is_file() and entry.suffix == ".txt" and match:
            pages.append((int(match.group(1)), entry.name, entry))
    pages.sort()
    numbers = [n for n, _, _ in pages]
    if numbers and numbers != list(range(numbers[0], numbers[0] + len(numbers))):
        log.warning("page numbering in %s has gaps; reindexing contiguously", ocr_dir)
    return [p for _, _, p in pages]


def collate_ocr(unpacked_dir: Path, output_path: Path) -> tuple[int, Path]:
    """Write one JSON string per line, page order, newlines escaped.

    The artifact is written to a temporary name and renamed only when every
    page was read, so a failure never leaves a partial JSONL behind.
    """
    output_path = Path(output_path)
    tmp = output_path.with_name(output_path.name + ".partial")
    replaced = 0
    count = 0
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as out:
            for page in page_files(unpacked_dir):
                try:
                    raw = page.read_bytes()
                except OSError as exc:
                    raise ExtractionError(f"cannot read OCR page {page.name}: {exc.strerror}") from exc
                text = raw.decode("utf-8", errors="replace")
                if "�" in text:
                    bad = text.count("�") - raw.decode("utf-8", errors="ignore").count("�")
                    replaced += bad
                out.write(json.dumps(text, ensure_ascii=False))
                out.write("\n")
                count += 1
        os.replace(tmp, output_path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    if replaced:
        log.warning("%s: replaced %d invalid UTF-8 sequences", output_path.name, replaced)
    return count, output_path
