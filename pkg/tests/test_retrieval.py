import hashlib
import io
import json
import random
import tarfile

import pytest

from conftest import FAST, PASSPHRASE, make_client, requires_gpg
from grin_transfer.inventory import collect
from grin_transfer.mock.corpus import build_tarball
from grin_transfer.mock.openpgp import encrypt
from grin_transfer.protocol import GrinState
from grin_transfer.retrieval import (
    DecryptError,
    FilePackage,
    GpgDecryptor,
    Lifecycle,
    Outcome,
    Retriever,
    StagingMonitor,
    SyncOptions,
    SyncPipeline,
    UnpackError,
    check_staging_capacity,
    clean_stale_staging,
    decrypt_package,
    unpack_package,
)
from grin_transfer.storage import ETAG_METADATA_KEY, LocalStorage
from grin_transfer.store import open_store

pytestmark = requires_gpg


@pytest.fixture(scope="module")
def gpg():
    d = GpgDecryptor()
    yield d
    d.close()


def encrypted_file(tmp_path, payload: bytes, passphrase=PASSPHRASE, name="B1.tar.gz.gpg"):
    path = tmp_path / name
    path.write_bytes(encrypt(payload, passphrase, random.Random(1)))
    return path


# -- decrypt / unpack ------------------------------------------------------------------


def test_decrypt_round_trip(tmp_path, gpg):
    payload = build_tarball([("METS.xml", b"<x/>"), ("ocr/00000001.txt", b"hello")])
    out = decrypt_package(encrypted_file(tmp_path, payload), PASSPHRASE, gpg)
    assert out.name == "B1.tar.gz" and out.read_bytes() == payload


def test_wrong_passphrase(tmp_path, gpg):
    path = encrypted_file(tmp_path, build_tarball([("a", b"x")]))
    with pytest.raises(DecryptError):
        decrypt_package(path, "not-it", gpg)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["B1.tar.gz.gpg"]


def test_truncated_ciphertext(tmp_path, gpg):
    path = encrypted_file(tmp_path, build_tarball([("a", random.Random(2).randbytes(5000))]))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(DecryptError):
        decrypt_package(path, PASSPHRASE, gpg)
    assert not (tmp_path / "B1.tar.gz").exists()


def test_decrypted_non_gzip_rejected(tmp_path, gpg):
    path = encrypted_file(tmp_path, b"plain text, not an archive")
    with pytest.raises(DecryptError, match="gzip"):
        decrypt_package(path, PASSPHRASE, gpg)
    assert not (tmp_path / "B1.tar.gz").exists()


def test_passphrase_not_on_command_line(tmp_path, monkeypatch):
    import subprocess

    seen = []
    real = subprocess.run

    def spy(cmd, *a, **kw):
        seen.append(cmd)
        return real(cmd, *a, **kw)

    monkeypatch.setattr(subprocess, "run", spy)
    d = GpgDecryptor()
    try:
        decrypt_package(encrypted_file(tmp_path, build_tarball([("a", b"x")])), PASSPHRASE, d)
    finally:
        d.close()
    assert seen and all(PASSPHRASE not in " ".join(map(str, c)) for c in seen)


def tar_with(entries):
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w:gz") as tar:
        for name, data, kind in entries:
            info = tarfile.TarInfo(name)
            if kind == "file":
                info.size = len(data)
                tar.addfile(info, io.BytesIO(data))
            elif kind == "symlink":
                info.type = tarfile.SYMTYPE
                info.linkname = data
                tar.addfile(info)
            elif kind == "dir":
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
    return raw.getvalue()


def test_unpack_manifest(tmp_path):
    entries = [(f"ocr/{i:08d}.txt", f"page {i}".encode(), "file") for i in range(1, 6)]
    entries += [("METS.xml", b"<m/>", "file"), ("images/00000001.bin", b"\0" * 300, "file"), ("images", None, "dir")]
    src = tmp_path / "p.tar.gz"
    src.write_bytes(tar_with(entries))
    manifest = unpack_package(src, tmp_path / "out")
    assert len(manifest) == 7
    assert dict(manifest)["images/00000001.bin"] == 300
    assert (tmp_path / "out" / "ocr" / "00000003.txt").read_text() == "page 3"


@pytest.mark.parametrize("bad", [
    ("../evil.txt", b"x", "file"),
    ("ocr/../../evil.txt", b"x", "file"),
    ("/abs.txt", b"x", "file"),
    ("link", "/etc/passwd", "symlink"),
])
def test_unsafe_archives_write_nothing(tmp_path, bad):
    src = tmp_path / "p.tar.gz"
    src.write_bytes(tar_with([("METS.xml", b"<m/>", "file"), bad]))
    with pytest.raises(UnpackError):
        unpack_package(src, tmp_path / "out")
    assert not (tmp_path / "out").exists() and not (tmp_path / "evil.txt").exists()


def test_empty_archive(tmp_path):
    src = tmp_path / "p.tar.gz"
    src.write_bytes(tar_with([]))
    assert unpack_package(src, tmp_path / "out") == []


def test_corrupt_archive(tmp_path):
    src = tmp_path / "p.tar.gz"
    src.write_bytes(b"\x1f\x8b" + b"garbage" * 50)
    with pytest.raises(UnpackError):
        unpack_package(src, tmp_path / "out")


def test_lifecycle_only_moves_forward(tmp_path):
    pkg = FilePackage("B1", tmp_path)
    pkg.advance(Lifecycle.DOWNLOADED)
    pkg.advance(Lifecycle.UPLOADED)
    with pytest.raises(RuntimeError):
        pkg.advance(Lifecycle.DECRYPTED)
    assert pkg.encrypted_path == tmp_path / "B1.tar.gz.gpg"


# -- staging --------------------------------------------------------------------------


def test_staging_monitor_threshold(tmp_path):
    (tmp_path / "a").write_bytes(b"\0" * 500)
    m = StagingMonitor(tmp_path, 0.9, capacity_bytes=1000)
    s = check_staging_capacity(m)
    assert s.used_fraction == pytest.approx(0.5) and s.ok
    (tmp_path / "b").write_bytes(b"\0" * 410)
    s = m.poll()
    assert s.used_fraction == pytest.approx(0.91) and s.paused


def test_staging_check_caches_within_interval(tmp_path):
    now = [0.0]
    m = StagingMonitor(tmp_path, 0.9, capacity_bytes=100, poll_interval=5, clock=lambda: now[0])
    assert m.check().ok
    (tmp_path / "a").write_bytes(b"\0" * 95)
    now[0] = 4.9
    assert m.check().ok
    now[0] = 5.0
    assert m.check().paused


def test_staging_disk_usage_mode(tmp_path):
    s = StagingMonitor(tmp_path).poll()
    assert 0 <= s.used_fraction <= 1


def test_clean_stale_staging(tmp_path):
    (tmp_path / "B1").mkdir()
    (tmp_path / "B1" / "B1.tar.gz.gpg").write_bytes(b"x")
    (tmp_path / "stray").write_bytes(b"x")
    assert clean_stale_staging(tmp_path) == 2 and list(tmp_path.iterdir()) == []


# -- per-volume sync against the mock ---------------------------------------------------


@pytest.fixture
def env(mock_factory, tmp_path, gpg):
    def build(options=SyncOptions(), **spec):
        spec.setdefault("volume_count", 6)
        spec.setdefault("initial_state_mix", (1, 4, 1))
        mock = mock_factory(**FAST, **spec)
        client = make_client(mock)
        store = open_store(tmp_path / "t.db")
        collect(client, store)
        storage = LocalStorage(tmp_path / "storage")
        r = Retriever(client, store, storage, tmp_path / "staging", PASSPHRASE, decryptor=gpg, options=options)
        return mock, r
    return build


def by_state(mock, state):
    return sorted(b for b, v in mock.corpus.volumes.items() if v.initial_state is state)


def test_sync_converted_volume(env, tmp_path):
    mock, r = env()
    b = by_state(mock, GrinState.CONVERTED)[0]
    vol = mock.corpus.volumes[b]
    assert r.sync_volume(b).outcome is Outcome.SYNCED
    stored = tmp_path / "storage" / f"{b}.tar.gz"
    assert hashlib.sha256(stored.read_bytes()).hexdigest() == vol.package_sha256
    lines = (tmp_path / "storage" / f"{b}.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(x) for x in lines] == vol.pages
    rec = r.store.get(b)
    assert rec.stored_etag == vol.etag and rec.marc.to_dict() == vol.marc and rec.storage_key == f"{b}.tar.gz"
    assert r.storage.head_artifact(f"{b}.tar.gz").metadata == {ETAG_METADATA_KEY: vol.etag}
    assert list((tmp_path / "staging").iterdir()) == []


def test_second_sync_skips_without_download(env):
    mock, r = env()
    b = by_state(mock, GrinState.CONVERTED)[0]
    r.sync_volume(b)
    mark = mock.mark()
    assert r.sync_volume(b).outcome is Outcome.SKIPPED_IDENTICAL
    assert mock.count("package_get", since=mark) == 0 and mock.count("package_head", since=mark) == 1


def test_unconverted_not_available(env):
    mock, r = env()
    b = by_state(mock, GrinState.UNCONVERTED)[0]
    assert r.sync_volume(b).outcome is Outcome.NOT_AVAILABLE
    assert mock.count("package_get") == 0


def test_unknown_barcode_missing(env):
    _, r = env()
    assert r.sync_volume("NOPE").outcome is Outcome.MISSING


def test_reconverted_volume_overwrites(env, tmp_path):
    mock, r = env()
    b = by_state(mock, GrinState.CONVERTED)[0]
    r.sync_volume(b)
    new_etag = mock.reconvert(b)
    assert r.sync_volume(b).outcome is Outcome.SYNCED
    assert r.store.get(b).stored_etag == new_etag
    stored = (tmp_path / "storage" / f"{b}.tar.gz").read_bytes()
    assert hashlib.sha256(stored).hexdigest() == mock.corpus.volumes[b].package_sha256
    assert "[reprocessed v1]" in (tmp_path / "storage" / f"{b}.jsonl").read_text()


def test_lost_store_skips_via_storage_metadata(env, tmp_path, gpg):
    mock, r = env()
    b = by_state(mock, GrinState.CONVERTED)[0]
    r.sync_volume(b)
    r.store.close()
    for p in tmp_path.glob("t.db*"):
        p.unlink()
    store = open_store(tmp_path / "t.db")
    collect(r.client, store)
    r2 = Retriever(r.client, store, r.storage, tmp_path / "staging", PASSPHRASE, decryptor=gpg)
    mark = mock.mark()
    assert r2.sync_volume(b).outcome is Outcome.SKIPPED_IDENTICAL
    assert mock.count("package_get", since=mark) == 0
    rec = store.get(b)
    assert rec.stored_etag == mock.corpus.volumes[b].etag
    assert rec.marc.to_dict() == mock.corpus.volumes[b].marc


def test_decrypt_failure_recorded(env, tmp_path):
    mock, r = env()
    r._passphrase = "wrong"
    b = by_state(mock, GrinState.CONVERTED)[0]
    res = r.sync_volume(b)
    assert res.outcome is Outcome.FAILED and res.code == "DecryptError"
    assert r.store.get(b).last_error[0] == "DecryptError" and r.store.get(b).stored_etag is None
    assert list((tmp_path / "staging").iterdir()) == []
    assert list((tmp_path / "storage").glob("*")) == []


def test_no_extraction_options(env, tmp_path):
    mock, r = env(options=SyncOptions(extract_marc=False, extract_ocr=False))
    b = by_state(mock, GrinState.CONVERTED)[0]
    assert r.sync_volume(b).outcome is Outcome.SYNCED
    assert not (tmp_path / "storage" / f"{b}.jsonl").exists()
    assert r.store.get(b).marc is None


def test_download_vanished_between_probe_and_get(env):
    mock, r = env()
    b = by_state(mock, GrinState.CONVERTED)[0]
    probe = r.probe(b)
    mock.set_state(b, GrinState.UNCONVERTED, available=False)
    with pytest.raises(Exception) as info:
        r.download(b)
    assert info.value.code == "NotAvailable"
    assert probe.available


# -- pipeline --------------------------------------------------------------------------


def test_pipeline_syncs_all_and_bounds_concurrency(mock_factory, tmp_path, gpg):
    mock = mock_factory(volume_count=24, initial_state_mix=(0, 1, 0), rate_limit=5, rate_burst=5)
    client = make_client(mock)
    store = open_store(tmp_path / "t.db")
    collect(client, store)
    r = Retriever(client, store, LocalStorage(tmp_path / "s"), tmp_path / "staging", PASSPHRASE, decryptor=gpg)
    monitor = StagingMonitor(tmp_path / "staging", poll_interval=0.05)
    mark = mock.mark()
    mock.reset_gauges()
    results = SyncPipeline(r, monitor).run(store.barcodes())
    assert sorted(x.barcode for x in results) == sorted(mock.corpus.volumes)
    assert {x.outcome for x in results} == {Outcome.SYNCED}
    report = mock.audit(mark)
    assert report.ok, report
    assert report.max_head <= 3 and report.max_get <= 4
