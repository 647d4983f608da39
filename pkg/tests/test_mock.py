import hashlib
import json

import requests

from conftest import FAST, TOKEN, make_client
from grin_transfer.mock import MockCorpusSpec, generate_corpus
from grin_transfer.mock.server import rate_violations
from grin_transfer.protocol import GrinState


def test_same_seed_same_bytes(tmp_path):
    a = generate_corpus(MockCorpusSpec(volume_count=8, seed=42))
    b = generate_corpus(MockCorpusSpec(volume_count=8, seed=42))
    assert a.write_manifest(tmp_path / "a.json").read_bytes() == b.write_manifest(tmp_path / "b.json").read_bytes()
    assert all(a.volumes[k].encrypted == b.volumes[k].encrypted for k in a.volumes)
    c = generate_corpus(MockCorpusSpec(volume_count=8, seed=43))
    assert a.volumes["B001"].package != c.volumes["B001"].package


def test_manifest_is_json_with_expected_shape(tmp_path):
    corpus = generate_corpus(MockCorpusSpec(volume_count=3, seed=1))
    data = json.loads(corpus.write_manifest(tmp_path / "m.json").read_text())
    entry = data["volumes"]["B002"]
    assert entry["page_count"] == len(entry["pages"])
    assert entry["package_sha256"] == hashlib.sha256(corpus.volumes["B002"].package).hexdigest()
    assert data["spec"]["volume_count"] == 3


def test_page_count_range_respected():
    corpus = generate_corpus(MockCorpusSpec(volume_count=10, page_count_range=(3, 3)))
    assert {len(v.pages) for v in corpus.volumes.values()} == {3}


def test_initial_state_mix_allocates_exactly():
    corpus = generate_corpus(MockCorpusSpec(volume_count=10, initial_state_mix=(0.4, 0.4, 0.2)))
    counts = {s: sum(v.initial_state is s for v in corpus.volumes.values()) for s in GrinState}
    assert counts[GrinState.UNCONVERTED] == 4 and counts[GrinState.CONVERTED] == 4
    assert counts[GrinState.PREVIOUSLY_DOWNLOADED] == 2


def test_latency_cohorts():
    spec = MockCorpusSpec(volume_count=100, seed=5)
    lat = [v.latency for v in generate_corpus(spec).volumes.values()]
    assert sum(x <= spec.latency_t for x in lat) == 80
    assert max(lat) <= spec.tail_factor * spec.latency_t


def test_production_constants():
    p = MockCorpusSpec.production()
    assert p.conversion_cap == 50_000 and p.latency_t == 48 * 3600 and p.package_retention == 14 * 86400


def test_conversion_timeline(mock_factory):
    mock = mock_factory(volume_count=100, seed=5, conversion_cap=100, **FAST)
    client = make_client(mock)
    client.request_conversion(sorted(mock.corpus.volumes))
    assert mock.states()[GrinState.IN_PROCESS] == 100
    mock.advance_time(mock.spec.latency_t)
    assert mock.states()[GrinState.CONVERTED] == 80
    mock.advance_time(mock.spec.latency_t * (mock.spec.tail_factor - 1))
    assert mock.states()[GrinState.CONVERTED] == 100


def test_injected_failure_surfaces(mock_factory):
    mock = mock_factory(volume_count=50, failure_injections={"B042": "SOURCE_DEFECT"}, **FAST)
    make_client(mock).request_conversion(["B042"])
    mock.advance_time(mock.spec.latency_t * mock.spec.tail_factor)
    assert mock.volumes["B042"].state is GrinState.FAILED
    assert [s for _, s in mock.timeline("B042")] == ["UNCONVERTED", "IN_PROCESS", "FAILED"]


def test_retention_expiry(mock_factory, tmp_path):
    mock = mock_factory(volume_count=2, initial_state_mix=(0, 1, 0), **FAST)
    client = make_client(mock)
    assert client.probe_package("B001").available
    client.download_package("B001", tmp_path / "B001.gpg")
    mock.advance_time(mock.spec.package_retention)
    assert not client.probe_package("B001").available
    headers = {"Authorization": f"Bearer {TOKEN}"}
    assert requests.get(f"{mock.url}/libraries/Harvard/B002.tar.gz.gpg", headers=headers).status_code == 404
    # downloaded before expiry -> previously downloaded, never downloaded -> back to unconverted
    assert mock.volumes["B001"].state is GrinState.PREVIOUSLY_DOWNLOADED
    assert mock.volumes["B002"].state is GrinState.UNCONVERTED


def test_download_bytes_frozen_at_request_start(mock_factory):
    mock = mock_factory(volume_count=1, initial_state_mix=(0, 1, 0), **FAST)
    old = mock.corpus.volumes["B001"].encrypted
    headers = {"Authorization": f"Bearer {TOKEN}"}
    with requests.get(f"{mock.url}/libraries/Harvard/B001.tar.gz.gpg", headers=headers, stream=True) as resp:
        first = next(resp.iter_content(1024))
        new_etag = mock.reconvert("B001")
        body = first + b"".join(resp.iter_content(65536))
    assert body == old and resp.headers["ETag"] != new_etag
    assert make_client(mock).probe_package("B001").etag == new_etag


def test_reconvert_changes_content_not_metadata(mock_factory):
    mock = mock_factory(volume_count=1, initial_state_mix=(0, 1, 0), **FAST)
    before = mock.corpus.volumes["B001"]
    mock.reconvert("B001")
    after = mock.corpus.volumes["B001"]
    assert after.etag != before.etag and after.version == 1
    assert after.marc == before.marc and after.pages[1:] == before.pages[1:]


def test_unknown_path_is_404_and_logged(mock_factory):
    mock = mock_factory(volume_count=1, **FAST)
    r = requests.get(f"{mock.url}/nope", headers={"Authorization": f"Bearer {TOKEN}"})
    assert r.status_code == 404 and mock.requests()[-1].kind == "unknown"


def test_rate_violation_oracle():
    assert rate_violations([0.0, 0.1, 0.2, 0.3, 0.4, 1.0], 5) == []
    assert rate_violations([0.0, 0.1, 0.2, 0.3, 0.4, 0.99], 5)
