from __future__ import annotations

import os
import shutil
from pathlib import Path

import pytest

from grin_transfer.config import RunConfig, SecretRef, StorageRef
from grin_transfer.mock import MockCorpusSpec, MockGrin, generate_corpus
from grin_transfer.protocol import GrinClient, RateBudget, RateLimiter, RetryPolicy, StaticTokenProvider

TOKEN = "test-token"
PASSPHRASE = "test-passphrase"
FAST = dict(rate_limit=200.0, rate_burst=200)

requires_gpg = pytest.mark.skipif(shutil.which("gpg") is None, reason="gpg binary not installed")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(autouse=True)
def _secrets(monkeypatch):
    monkeypatch.setenv("GRIN_TRANSFER_TOKEN", TOKEN)
    monkeypatch.setenv("GRIN_TRANSFER_PASSPHRASE", PASSPHRASE)


def make_mock(**spec_kwargs) -> MockGrin:
    spec_kwargs.setdefault("token", TOKEN)
    spec_kwargs.setdefault("passphrase", PASSPHRASE)
    return MockGrin(generate_corpus(MockCorpusSpec(**spec_kwargs))).start()


@pytest.fixture
def mock_factory():
    started = []

    def factory(**kwargs) -> MockGrin:
        m = make_mock(**kwargs)
        started.append(m)
        return m

    yield factory
    for m in started:
        m.stop()


def make_client(mock: MockGrin, *, rate: float | None = None, burst: int | None = None, retry: RetryPolicy | None = None, **kw) -> GrinClient:
    budget = RateBudget(rate or mock.spec.rate_limit, burst or mock.spec.rate_burst)
    return GrinClient(
        mock.url,
        mock.spec.library_directory,
        StaticTokenProvider(TOKEN),
        limiter=RateLimiter(budget),
        retry=retry or RetryPolicy(base=0.01, cap=0.05),
        **kw,
    )


def make_config(tmp: Path, mock: MockGrin | None = None, **overrides) -> RunConfig:
    env = lambda name, var: SecretRef(name, var, tmp / name)  # noqa: E731
    values = dict(
        library_directory=mock.spec.library_directory if mock else "Harvard",
        credentials_ref=env("token", "GRIN_TRANSFER_TOKEN"),
        passphrase_ref=env("passphrase", "GRIN_TRANSFER_PASSPHRASE"),
        storage=StorageRef(root=tmp / "storage"),
        grin_base_url=mock.url if mock else "http://127.0.0.1:9",
        store_path=tmp / "state" / "grin-transfer.db",
        staging_root=tmp / "staging",
        staging_poll_interval=0.05,
    )
    if mock is not None:
        values["rate"] = RateBudget(mock.spec.rate_limit, mock.spec.rate_burst)
    values.update(overrides)
    return RunConfig(**values)


def write_config_dir(tmp: Path, mock: MockGrin, **sync) -> Path:
    """INI config directory for driving the CLI in a subprocess."""
    cfg = tmp / "config"
    cfg.mkdir(parents=True, exist_ok=True)
    lines = [
        "[grin]",
        f"library_directory = {mock.spec.library_directory}",
        f"base_url = {mock.url}",
        f"max_requests_per_second = {mock.spec.rate_limit}",
        f"burst = {mock.spec.rate_burst}",
        "[paths]",
        f"store = {tmp / 'state' / 'grin-transfer.db'}",
        f"staging = {tmp / 'staging'}",
        "[storage]",
        "backend = local",
        f"root = {tmp / 'storage'}",
        "[sync]",
        "staging_poll_interval = 0.05",
    ]
    lines += [f"{k} = {v}" for k, v in sync.items()]
    (cfg / "config.ini").write_text("\n".join(lines) + "\n")
    (cfg / "token").write_text(TOKEN + "\n")
    (cfg / "passphrase").write_text(PASSPHRASE + "\n")
    return cfg


def cli_env() -> dict[str, str]:
    env = dict(os.environ)
    env.pop("GRIN_TRANSFER_TOKEN", None)
    env.pop("GRIN_TRANSFER_PASSPHRASE", None)
    return env


@pytest.fixture(scope="session")
def s3_endpoint():
    """A moto S3 server on a free port, shared by the session."""
    from moto.server import ThreadedMotoServer

    server = ThreadedMotoServer(ip_address="127.0.0.1", port=0)
    server.start()
    host, port = server.get_host_and_port()
    yield f"http://{host}:{port}"
    server.stop()


@pytest.fixture
def s3_bucket(s3_endpoint, monkeypatch):
    import uuid

    import boto3

    for k, v in dict(AWS_ACCESS_KEY_ID="testing", AWS_SECRET_ACCESS_KEY="testing", AWS_DEFAULT_REGION="us-east-1").items():
        monkeypatch.setenv(k, v)
    name = f"grin-{uuid.uuid4().hex[:12]}"
    boto3.client("s3", endpoint_url=s3_endpoint).create_bucket(Bucket=name)
    return name
