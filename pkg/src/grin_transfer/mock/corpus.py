"""Deterministic fixture corpus for the mock GRIN service.

Every volume gets a METS document embedding a MARCXML record, per-page OCR
text, image stubs, a gzip-compressed tar of those files and an OpenPGP
encryption of the tarball. The manifest records the ground truth (clean MARC
values, page texts, digests, etags, state timeline) so every artifact the
pipeline produces can be checked without re-reading the corpus.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import random
import tarfile
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..protocol.codec import GrinState
from . import openpgp

MARC_NS = "http://www.loc.gov/MARC21/slim"
METS_NS = "http://www.loc.gov/METS/"
XLINK_NS = "http://www.w3.org/1999/xlink"
TAR_MTIME = 1262304000  # 2010-01-01

# scaled analogue of the production constants: 48 h -> T, two weeks -> 7 T
DEFAULT_LATENCY_T = 4.8


@dataclass
class MockCorpusSpec:
    volume_count: int = 10
    seed: int = 0
    page_count_range: tuple[int, int] = (3, 20)
    # fractions of UNCONVERTED / CONVERTED / PREVIOUSLY_DOWNLOADED
    initial_state_mix: tuple[float, float, float] = (1.0, 0.0, 0.0)
    conversion_cap: int = 50
    latency_t: float = DEFAULT_LATENCY_T
    fast_fraction: float = 0.8
    tail_factor: float = 2.5
    failure_injections: dict[str, str] = field(default_factory=dict)
    rate_limit: float = 5.0
    rate_burst: int = 5
    package_retention: float = 7 * DEFAULT_LATENCY_T
    previous_available: bool = True
    page_size: int = 100
    image_size_range: tuple[int, int] = (256, 1024)
    library_directory: str = "Harvard"
    passphrase: str = "test-passphrase"
    token: str = "test-token"
    barcode_prefix: str = "B"

    @classmethod
    def production(cls, **overrides) -> "MockCorpusSpec":
        """Unscaled constants: 50,000 queued conversions, 48 h, two weeks."""
        base = dict(conversion_cap=50_000, latency_t=48 * 3600.0, package_retention=14 * 24 * 3600.0)
        base.update(overrides)
        return cls(**base)

    def barcodes(self) -> list[str]:
        width = max(3, len(str(self.volume_count)))
        return [f"{self.barcode_prefix}{i:0{width}d}" for i in range(1, self.volume_count + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MockVolumeData:
    barcode: str
    title: str
    google_books_url: str
    scanned_date: str
    initial_state: GrinState
    latency: float
    fail_reason: str | None
    marc: dict
    pages: list[str]
    details: dict[str, str]
    package: bytes  # decrypted tar.gz
    encrypted: bytes
    version: int = 0

    @property
    def etag(self) -> str:
        return '"' + hashlib.md5(self.encrypted).hexdigest() + '"'

    @property
    def package_sha256(self) -> str:
        return hashlib.sha256(self.package).hexdigest()

    def manifest_entry(self) -> dict:
        return {
            "barcode": self.barcode,
            "title": self.title,
            "initial_state": self.initial_state.value,
            "latency": self.latency,
            "fail_reason": self.fail_reason,
            "marc": self.marc,
            "page_count": len(self.pages),
            "pages": self.pages,
            "details": self.details,
            "package_sha256": self.package_sha256,
            "package_size": len(self.package),
            "encrypted_etag": self.etag,
            "encrypted_size": len(self.encrypted),
            "version": self.version,
        }


@dataclass
class Corpus:
    spec: MockCorpusSpec
    volumes: dict[str, MockVolumeData]

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "volumes": {b: v.manifest_entry() for b, v in sorted(self.volumes.items())},
        }

    def write_manifest(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(), indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# text generation

_WORDS = (
    "geology of massachusetts and rhode island bulletin survey report annual department interior "
    "college library science center harvard history natural philosophy memoirs account voyage "
    "description catalogue plants river county town records sermon treatise letters essays "
    "observations travels journal minerals botany treatise principles elements volume part"
).split()
_FOREIGN = ["ΠΟΛΕΤΑΜΕΝΤ", "Гуйр", "θEOΓOOS", "Bibliothèque", "Straße", "ЕБЫМКГТИ", "naïve", "über"]
_SURNAMES = ["Emerson", "Smith", "Lane", "Agassiz", "Gray", "Peirce", "Whitney", "Dana", "Hitchcock", "Lowell"]
_GIVEN = ["Benjamin K", "George Otis", "Franklin K", "Louis", "Asa", "Benjamin", "Josiah D", "James D", "Edward", "Amy"]
_CORPS = [("Harvard University", "Museum of Comparative Zoology"), ("Geological Survey (U.S.)", None),
          ("Massachusetts", "Board of Agriculture"), ("American Academy of Arts and Sciences", None)]
_MEETINGS = [("International Geological Congress", "Paris", "1900"), ("Congress of Americanists", "Stuttgart", "1904")]
_TOPICS = ["Geology", "Mineralogy", "Botany", "Natural history", "Paleontology", "Zoology"]
_PLACES = ["Massachusetts", "Rhode Island", "New England", "Boston (Mass.)"]
_FORMS = ["Maps", "Periodicals", "Early works to 1800"]
_GENRES = ["Maps", "Atlases", "Catalogs", "Sermons"]
_NOTES = ["Includes index", "Bibliography: p. 280-287", "Issued in parts", "Plates printed on both sides"]
_LANGS = ["eng", "eng", "eng", "fre", "ger", "lat"]


def _words(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(_WORDS) for _ in range(n))


def _page_text(rng: random.Random) -> str:
    roll = rng.random()
    if roll < 0.08:
        return ""
    if roll < 0.12:
        return "\n"
    lines = []
    for _ in range(rng.randint(1, 12)):
        line = _words(rng, rng.randint(1, 9))
        if rng.random() < 0.3:
            line = line.upper()
        if rng.random() < 0.1:
            line += " " + rng.choice(_FOREIGN)
        lines.append(line)
    text = "\n".join(lines)
    if rng.random() < 0.7:
        text += "\n"
    return text


def _make_marc(rng: random.Random, index: int) -> dict:
    """Clean source values; the XML gets ISBD punctuation added on top."""
    date_type = rng.choice("smq")
    date_1 = str(rng.randint(1700, 1925))
    date_2 = str(int(date_1) + rng.randint(1, 30)) if date_type in "mq" else None
    title = _words(rng, rng.randint(2, 6)).capitalize()
    m = {
        "control_number": f"{990000000 + index * 7919 + rng.randrange(7919):09d}",
        "date_type": date_type,
        "date_1": date_1,
        "date_2": date_2,
        "language": rng.choice(_LANGS),
        "lccn": f"{rng.randint(1, 99):02d}{rng.randint(0, 999999):06d}" if rng.random() < 0.6 else None,
        "lc_call_number": None,
        "isbns": [],
        "oclc_numbers": [],
        "title": title,
        "subtitles": [],
        "personal_authors": [],
        "corporate_authors": [],
        "meeting_authors": [],
        "subjects": [],
        "genres": [],
        "general_notes": [],
    }
    if rng.random() < 0.75:
        m["lc_call_number"] = f"QE{rng.randint(1, 999)} .{rng.choice('ABCEHM')}{rng.randint(1, 99)}"
    if rng.random() < 0.3:
        m["isbns"] = [f"{rng.randint(10**9, 10**10 - 1)}" for _ in range(rng.randint(1, 2))]
    if rng.random() < 0.7:
        m["oclc_numbers"] = [f"{rng.randint(10**6, 10**8)}" for _ in range(rng.randint(1, 2))]
    if rng.random() < 0.5:
        m["subtitles"] = [_words(rng, rng.randint(2, 5))]
    for _ in range(rng.choice([0, 1, 1, 1, 2])):
        surname, given = rng.choice(_SURNAMES), rng.choice(_GIVEN)
        born = rng.randint(1700, 1880)
        m["personal_authors"].append({"name": f"{surname}, {given}", "dates": f"{born}-{born + rng.randint(30, 90)}"})
    if rng.random() < 0.3:
        a, b = rng.choice(_CORPS)
        m["corporate_authors"].append({"a": a, "b": b})
    if rng.random() < 0.1:
        a, c, d = rng.choice(_MEETINGS)
        m["meeting_authors"].append({"a": a, "c": c, "d": d})
    for _ in range(rng.randint(0, 3)):
        parts = [rng.choice(_TOPICS)]
        if rng.random() < 0.6:
            parts.append(rng.choice(_PLACES))
        if rng.random() < 0.4:
            parts.append(rng.choice(_FORMS))
        m["subjects"].append(parts)
    if rng.random() < 0.3:
        m["genres"] = [rng.choice(_GENRES)]
    m["general_notes"] = rng.sample(_NOTES, rng.randint(0, 2))
    return m


def expected_marc(source: dict) -> dict:
    """Flatten the generator's structured source record into MarcMetadata fields."""
    out = dict(source)
    out["personal_authors"] = [f"{p['name']} {p['dates']}" for p in source["personal_authors"]]
    out["corporate_authors"] = [" ".join(x for x in (c["a"], c["b"]) if x) for c in source["corporate_authors"]]
    out["meeting_authors"] = [f"{m['a']} {m['c']} {m['d']}" for m in source["meeting_authors"]]
    out["subjects"] = [" -- ".join(parts) for parts in source["subjects"]]
    return out


def _marc_xml(source: dict) -> ET.Element:
    rec = ET.Element(f"{{{MARC_NS}}}record")
    ET.SubElement(rec, f"{{{MARC_NS}}}leader").text = "00000cam a2200000 a 4500"
    ET.SubElement(rec, f"{{{MARC_NS}}}controlfield", tag="001").text = source["control_number"]
    f008 = (
        "870303"
        + source["date_type"]
        + source["date_1"]
        + (source["date_2"] or "    ")
        + "mau" + " " * 17
        + source["language"]
        + " d"
    )
    assert len(f008) == 40
    ET.SubElement(rec, f"{{{MARC_NS}}}controlfield", tag="008").text = f008

    def df(tag, subfields, ind1=" ", ind2=" "):
        el = ET.SubElement(rec, f"{{{MARC_NS}}}datafield", tag=tag, ind1=ind1, ind2=ind2)
        for code, value in subfields:
            ET.SubElement(el, f"{{{MARC_NS}}}subfield", code=code).text = value

    if source["lccn"]:
        df("010", [("a", f"   {source['lccn']} ")])
    for isbn in source["isbns"]:
        df("020", [("a", isbn), ("q", "(pbk.)")])
    for n in source["oclc_numbers"]:
        df("035", [("a", f"(OCoLC)ocm{n}")])
    df("035", [("a", "(MH)00" + source["control_number"][-7:])])
    if source["lc_call_number"]:
        cls, item = source["lc_call_number"].split(" ", 1)
        df("050", [("a", cls), ("b", item)], ind2="4")
    for p in source["personal_authors"]:
        df("100", [("a", p["name"] + ","), ("d", p["dates"] + ".")], ind1="1")
    for c in source["corporate_authors"]:
        df("110", [("a", c["a"] + ".")] + ([("b", c["b"] + ".")] if c["b"] else []), ind1="2")
    for m in source["meeting_authors"]:
        df("111", [("a", m["a"]), ("c", m["c"] + ","), ("d", m["d"] + ".")], ind1="2")
    title_sf = [("a", source["title"] + (" :" if source["subtitles"] else " /"))]
    for s in source["subtitles"]:
        title_sf.append(("b", s + " /"))
    title_sf.append(("c", "by a member of the society."))
    df("245", title_sf, ind1="1", ind2="0")
    df("260", [("a", "Boston :"), ("b", "Printed for the author,"), ("c", source["date_1"] + ".")])
    for note in source["general_notes"]:
        df("500", [("a", note + ".")])
    for parts in source["subjects"]:
        codes = ["a", "z", "v"][: len(parts)] if len(parts) < 3 else ["a", "z", "v"]
        subs = [(codes[i], parts[i] + ("." if i == len(parts) - 1 else "")) for i in range(len(parts))]
        df("650", subs, ind2="0")
    for g in source["genres"]:
        df("655", [("a", g + ".")], ind2="7")
    return rec


def mets_document(barcode: str, source: dict, page_count: int) -> bytes:
    ET.register_namespace("mets", METS_NS)
    ET.register_namespace("marc", MARC_NS)
    ET.register_namespace("xlink", XLINK_NS)
    root = ET.Element(f"{{{METS_NS}}}mets", OBJID=barcode)
    dmd = ET.SubElement(root, f"{{{METS_NS}}}dmdSec", ID="DMD1")
    wrap = ET.SubElement(dmd, f"{{{METS_NS}}}mdWrap", MDTYPE="MARC")
    xml_data = ET.SubElement(wrap, f"{{{METS_NS}}}xmlData")
    xml_data.append(_marc_xml(source))
    file_sec = ET.SubElement(root, f"{{{METS_NS}}}fileSec")
    grp = ET.SubElement(file_sec, f"{{{METS_NS}}}fileGrp", USE="ocr")
    for i in range(1, page_count + 1):
        f = ET.SubElement(grp, f"{{{METS_NS}}}file", ID=f"OCR{i:08d}")
        ET.SubElement(f, f"{{{METS_NS}}}FLocat", {f"{{{XLINK_NS}}}href": f"ocr/{i:08d}.txt", "LOCTYPE": "URL"})
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def build_tarball(members: list[tuple[str, bytes]]) -> bytes:
    """gzip-compressed tar with fixed metadata so identical input gives identical bytes."""
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for name, data in members:
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = TAR_MTIME
            info.mode = 0o644
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            tar.addfile(info, io.BytesIO(data))
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0, compresslevel=6) as gz:
        gz.write(raw.getvalue())
    return out.getvalue()


def package_members(barcode: str, source: dict, pages: list[str], images: list[bytes]) -> list[tuple[str, bytes]]:
    members = [("METS.xml", mets_document(barcode, source, len(pages)))]
    members += [(f"ocr/{i:08d}.txt", text.encode("utf-8")) for i, text in enumerate(pages, 1)]
    members += [(f"images/{i:08d}.bin", img) for i, img in enumerate(images, 1)]
    return members


def _details(rng: random.Random) -> dict[str, str]:
    return {
        "viewability": rng.choice(["VIEW_FULL", "VIEW_SNIPPET", "VIEW_NONE"]),
        "opted_out": rng.choice(["false", "false", "true"]),
        "conditions": rng.choice(["", "torn pages", "tight binding", "foxing"]),
        "scannable": rng.choice(["true", "true", "false"]),
        "tagging": rng.choice(["true", "false"]),
        "audit": rng.choice(["", "PASSED", "FAILED"]),
        "material_error_pct": f"{rng.uniform(0, 5):.2f}",
        "overall_error_pct": f"{rng.uniform(0, 10):.2f}",
        "claimed": rng.choice(["true", "false"]),
        "ocr_analysis_score": str(rng.randint(0, 100)),
        "ocr_gtd_score": str(rng.randint(0, 100)),
        "digitization_method": rng.choice(["NONDESTRUCTIVE", "DESTRUCTIVE"]),
        "check_in_date": f"2008/{rng.randint(1, 12):02d}/{rng.randint(1, 28):02d}",
        "source_library_bibkey": f"{rng.randint(10**8, 10**9 - 1):09d}",
        "allow_download_updated": f"2019/{rng.randint(1, 12):02d}/{rng.randint(1, 28):02d}",
        "viewability_updated": f"2020/{rng.randint(1, 12):02d}/{rng.randint(1, 28):02d}",
    }


def _allocate(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Integer counts per bucket summing to n (largest remainder)."""
    total = sum(fractions)
    raw = [n * f / total for f in fractions]
    counts = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_volume(spec: MockCorpusSpec, barcode: str, index: int, state: GrinState, latency: float, version: int = 0) -> MockVolumeData:
    rng = random.Random(f"{spec.seed}/{barcode}")
    source = _make_marc(rng, index)
    lo, hi = spec.page_count_range
    pages = [_page_text(rng) for _ in range(rng.randint(lo, hi))]
    ilo, ihi = spec.image_size_range
    images = [rng.randbytes(rng.randint(ilo, ihi)) for _ in pages]
    details = _details(rng)
    scanned = f"20{rng.randint(5, 12):02d}/{rng.randint(1, 12):02d}/{rng.randint(1, 28):02d} {rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}"
    if version:
        # a re-conversion: same book, refreshed OCR on the first page
        pages[0] = pages[0] + f"[reprocessed v{version}]\n"
    package = build_tarball(package_members(barcode, source, pages, images))
    enc_rng = random.Random(f"{spec.seed}/{barcode}/enc/{version}")
    encrypted = openpgp.encrypt(package, spec.passphrase, enc_rng, filename=f"{barcode}.tar.gz".encode())
    return MockVolumeData(
        barcode=barcode,
        title=source["title"],
        google_books_url=f"https://books.google.com/books?id={hashlib.sha1(barcode.encode()).hexdigest()[:12]}",
        scanned_date=scanned,
        initial_state=state,
        latency=latency,
        fail_reason=spec.failure_injections.get(barcode),
        marc=expected_marc(source),
        pages=pages,
        details=details,
        package=package,
        encrypted=encrypted,
        version=version,
    )


def generate_corpus(spec: MockCorpusSpec) -> Corpus:
    barcodes = spec.barcodes()
    n = len(barcodes)
    rng = random.Random(f"{spec.seed}/layout")

    states = []
    for state, count in zip(
        (GrinState.UNCONVERTED, GrinState.CONVERTED, GrinState.PREVIOUSLY_DOWNLOADED),
        _allocate(n, spec.initial_state_mix),
    ):
        states += [state] * count
    rng.shuffle(states)

    # exactly round(fast_fraction * n) volumes convert within T, the rest within tail_factor * T
    n_fast = round(spec.fast_fraction * n)
    cohort = list(range(n))
    rng.shuffle(cohort)
    fast = set(cohort[:n_fast])
    latencies = []
    for i in range(n):
        if i in fast:
            latencies.append(rng.uniform(0.05, 1.0) * spec.latency_t)
        else:
            latencies.append(rng.uniform(1.0 + 1e-6, spec.tail_factor) * spec.latency_t)

    volumes = {
        b: make_volume(spec, b, i, states[i], latencies[i]) for i, b in enumerate(barcodes)
    }
    return Corpus(spec, volumes)
