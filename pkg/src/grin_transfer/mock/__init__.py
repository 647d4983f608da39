"""Offline stand-in for GRIN: fixture corpus, OpenPGP writer and HTTP server."""

from .corpus import Corpus, MockCorpusSpec, expected_marc, generate_corpus
from .server import ComplianceReport, MockGrin, VirtualClock, rate_violations

__all__ = [
    "ComplianceReport",
    "Corpus",
    "MockCorpusSpec",
    "MockGrin",
    "VirtualClock",
    "expected_marc",
    "generate_corpus",
    "rate_violations",
]
