import hashlib
import math
import time

import pytest
import requests
from hypothesis import given
from hypothesis import strategies as st

from conftest import FAST, TOKEN, make_client
from grin_transfer.protocol import (
    CONDITION_FIELDS,
    UNKNOWN,
    CredentialError,
    Endpoint,
    EndpointKind,
    GrinClient,
    GrinState,
    RetryPolicy,
    StaticTokenProvider,
    TransientError,
    TsvListingCodec,
    VolumeListing,
)
from grin_transfer.protocol.codec import CodecError

# -- codec ---------------------------------------------------------------------

cell = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00\r"), max_size=20)


@given(
    rows=st.lists(
        st.tuples(
            st.from_regex(r"[A-Z0-9]{1,12}", fullmatch=True),
            st.sampled_from(list(GrinState)),
            cell,
            cell,
        ),
        max_size=15,
        unique_by=lambda r: r[0],
    ),
    cursor=st.one_of(st.none(), st.from_regex(r"[A-Za-z0-9_=-]{1,20}", fullmatch=True)),
)
def test_listing_round_trip(rows, cursor):
    codec = TsvListingCodec()
    listings = [
        VolumeListing(b, s, title=t or None, scanned_date=d or None, extras={"shelf": "x"})
        for b, s, t, d in rows
    ]
    body, headers = codec.encode(listings, cursor)
    decoded, nxt = codec.decode(body, headers)
    assert nxt == cursor
    assert decoded == listings


def test_blank_state_is_unconverted():
    body = b"barcode\tstate\ttitle\nB1\t\tA title\n"
    (item,), cursor = TsvListingCodec().decode(body, {})
    assert item.grin_state is GrinState.UNCONVERTED and cursor is None


def test_codec_rejects_duplicates_and_missing_columns():
    with pytest.raises(CodecError):
        TsvListingCodec().decode(b"barcode\tstate\nB1\t\nB1\t\n", {})
    with pytest.raises(CodecError):
        TsvListingCodec().decode(b"barcode\ttitle\nB1\tx\n", {})


def test_endpoint_paths():
    e = Endpoint("Harvard", EndpointKind.PACKAGE_HEAD, {"barcode": "B001"})
    assert e.path() == "/libraries/Harvard/B001.tar.gz.gpg" and e.query() == {}
    e = Endpoint("Harvard", EndpointKind.ALL_BOOKS_PAGE, {"cursor": "abc"})
    assert e.path() == "/libraries/Harvard/_all_books" and e.query() == {"cursor": "abc"}
    with pytest.raises(ValueError):
        Endpoint("", EndpointKind.FAILURES_PAGE)


def test_token_not_in_repr():
    assert TOKEN not in repr(StaticTokenProvider(TOKEN))


# -- against the mock ----------------------------------------------------------


def test_listing_pages(mock_factory):
    mock = mock_factory(volume_count=500, seed=3, **FAST)
    client = make_client(mock)
    page, cursor = client.list_books_page()
    assert len(page) == 100 and cursor
    seen = [item.barcode for item in client.iter_books()]
    assert len(seen) == len(set(seen)) == 500
    assert set(seen) == set(mock.corpus.volumes)
    assert mock.count("_all_books") == 1 + math.ceil(500 / 100)


def test_listing_empty_corpus(mock_factory):
    mock = mock_factory(volume_count=0, **FAST)
    assert make_client(mock).list_books_page() == ([], None)


def test_listing_carries_extra_columns(mock_factory):
    mock = mock_factory(volume_count=3, **FAST)
    (first, *_), _ = make_client(mock).list_books_page()
    assert "shelf_location" in first.extras


def test_conversion_backlog(mock_factory):
    mock = mock_factory(volume_count=60, conversion_cap=50, **FAST)
    client = make_client(mock)
    barcodes = sorted(mock.corpus.volumes)
    r = client.request_conversion(barcodes[:49])
    assert r.count == 49 and not r.queue_full and mock.backlog() == 49
    r = client.request_conversion([barcodes[49]])
    assert r.accepted == (barcodes[49],) and not r.queue_full
    r = client.request_conversion([barcodes[50]])
    assert r.count == 0 and r.queue_full
    assert mock.count("_process", status=429) == 1


def test_conversion_resubmit_is_idempotent(mock_factory):
    mock = mock_factory(volume_count=3, **FAST)
    client = make_client(mock)
    client.request_conversion(["B001"])
    assert client.request_conversion(["B001"]).accepted == ("B001",)
    assert mock.backlog() == 1


def test_probe_and_download(mock_factory, tmp_path):
    mock = mock_factory(volume_count=3, initial_state_mix=(1, 2, 0), **FAST)
    client = make_client(mock)
    converted = [b for b, v in mock.corpus.volumes.items() if v.initial_state is GrinState.CONVERTED]
    blank = [b for b, v in mock.corpus.volumes.items() if v.initial_state is GrinState.UNCONVERTED]
    probe = client.probe_package(converted[0])
    assert probe.available and probe.etag == mock.corpus.volumes[converted[0]].etag and probe.content_length > 0
    assert not client.probe_package(blank[0]).available
    out = tmp_path / "x.gpg"
    result = client.download_package(converted[0], out)
    assert result.byte_count == probe.content_length == out.stat().st_size
    assert result.etag == probe.etag
    assert hashlib.md5(out.read_bytes()).hexdigest() == probe.etag.strip('"')


def test_download_retries_after_disconnect(mock_factory, tmp_path):
    mock = mock_factory(volume_count=1, initial_state_mix=(0, 1, 0), **FAST)
    mock.inject_disconnect("B001", after_bytes=100, times=2)
    client = make_client(mock)
    out = tmp_path / "B001.tar.gz.gpg"
    result = client.download_package("B001", out)
    assert out.read_bytes() == mock.corpus.volumes["B001"].encrypted
    assert result.byte_count == len(mock.corpus.volumes["B001"].encrypted)
    assert mock.count("package_get") == 3


def test_download_gives_up_without_partial_file(mock_factory, tmp_path):
    mock = mock_factory(volume_count=1, initial_state_mix=(0, 1, 0), **FAST)
    mock.inject_disconnect("B001", after_bytes=100, times=10)
    client = make_client(mock, retry=RetryPolicy(base=0.001, cap=0.001, max_attempts=3))
    with pytest.raises(TransientError):
        client.download_package("B001", tmp_path / "B001.tar.gz.gpg")
    assert list(tmp_path.iterdir()) == []


def test_backoff_uses_injected_sleep(mock_factory):
    mock = mock_factory(volume_count=2, **FAST)
    mock.inject_status("_failed", 503, times=2)
    sleeps = []
    client = make_client(mock, retry=RetryPolicy(base=1.0, cap=60), sleep=sleeps.append)
    assert client.fetch_failures() == []
    assert len(sleeps) == 2 and sleeps[0] <= 1.0 and sleeps[1] <= 2.0


def test_credentials_rejected(mock_factory):
    mock = mock_factory(volume_count=2, **FAST)
    client = GrinClient(mock.url, "Harvard", StaticTokenProvider("wrong"))
    with pytest.raises(CredentialError):
        client.list_books_page()


def test_failures_page(mock_factory):
    mock = mock_factory(volume_count=50, failure_injections={"B042": "SOURCE_DEFECT", "B007": "BAD_SCAN"}, **FAST)
    client = make_client(mock)
    client.request_conversion(["B042", "B007", "B001"])
    assert client.fetch_failures() == []
    mock.advance_time(mock.spec.latency_t * mock.spec.tail_factor)
    assert sorted(client.fetch_failures()) == [("B007", "BAD_SCAN"), ("B042", "SOURCE_DEFECT")]


def test_book_details(mock_factory):
    mock = mock_factory(volume_count=60, **FAST)
    client = make_client(mock)
    batch = sorted(mock.corpus.volumes)[:50]
    before = mock.mark()
    details = client.fetch_book_details(batch)
    assert mock.count(since=before) == 1
    assert set(details) == set(batch)
    for b in batch:
        assert details[b] == {f: mock.corpus.volumes[b].details[f] or None for f in CONDITION_FIELDS}
    mixed = client.fetch_book_details(["B001", "NOPE"])
    assert mixed["NOPE"] == UNKNOWN and isinstance(mixed["B001"], dict)
    (one,) = client.fetch_book_details(["B002"]).values()
    assert set(one) == set(CONDITION_FIELDS)
    with pytest.raises(ValueError):
        client.fetch_book_details(sorted(mock.corpus.volumes)[:51])


def test_mock_rejects_sixth_request_in_a_second(mock_factory):
    mock = mock_factory(volume_count=1, rate_limit=5, rate_burst=5)
    headers = {"Authorization": f"Bearer {TOKEN}"}
    start = time.monotonic()
    statuses = [requests.get(mock.url + "/libraries/Harvard/_failed", headers=headers).status_code for _ in range(6)]
    assert time.monotonic() - start < 1.0
    assert statuses == [200] * 5 + [429]
    assert mock.log[-1].status == 429
    assert mock.audit().rate_violations


def test_client_traffic_stays_within_budget(mock_factory):
    mock = mock_factory(volume_count=20, initial_state_mix=(0, 1, 0), rate_limit=5, rate_burst=5)
    client = make_client(mock)
    for b in sorted(mock.corpus.volumes)[:12]:
        client.probe_package(b)
    report = mock.audit()
    assert report.rate_violations == [] and mock.count(status=429) == 0
