#!/usr/bin/env python3
"""Serve a seeded mock GRIN corpus until interrupted.

Writes a ready-to-use config directory (INI plus token and passphrase files)
so the CLI can be pointed at it:

    python scripts/serve_mock.py --volumes 200 --out /tmp/grin-demo
    grin-transfer collect --config /tmp/grin-demo/config
"""

from __future__ import annotations

import argparse
import signal
import threading
from pathlib import Path

from grin_transfer.mock import MockCorpusSpec, MockGrin, generate_corpus


def parse_mix(text: str) -> tuple[float, float, float]:
    parts = tuple(float(x) for x in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return parts


def write_config(out: Path, mock: MockGrin) -> Path:
    cfg = out / "config"
    cfg.mkdir(parents=True, exist_ok=True)
    (cfg / "config.ini").write_text(
        "[grin]\n"
        f"library_directory = {mock.spec.library_directory}\n"
        f"base_url = {mock.url}\n"
        f"max_requests_per_second = {mock.spec.rate_limit}\n"
        f"burst = {mock.spec.rate_burst}\n"
        "[paths]\n"
        f"store = {out / 'state' / 'grin-transfer.db'}\n"
        f"staging = {out / 'staging'}\n"
        "[storage]\n"
        "backend = local\n"
        f"root = {out / 'storage'}\n"
    )
    (cfg / "token").write_text(mock.spec.token + "\n")
    (cfg / "passphrase").write_text(mock.spec.passphrase + "\n")
    return cfg


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--volumes", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mix", type=parse_mix, default=(0.4, 0.4, 0.2),
                    help="unconverted,converted,previously-downloaded fractions")
    ap.add_argument("--cap", type=int, default=50, help="conversion queue cap")
    ap.add_argument("--rate", type=float, default=5.0, help="requests per second the server tolerates")
    ap.add_argument("--out", type=Path, required=True, help="directory for the config, manifest and run state")
    args = ap.parse_args()

    spec = MockCorpusSpec(volume_count=args.volumes, seed=args.seed, initial_state_mix=args.mix,
                          conversion_cap=args.cap, rate_limit=args.rate, rate_burst=max(1, int(args.rate)))
    mock = MockGrin(generate_corpus(spec)).start()
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = mock.corpus.write_manifest(args.out / "manifest.json")
    cfg = write_config(args.out, mock)
    print(f"mock GRIN at {mock.url}")
    print(f"config dir   {cfg}")
    print(f"manifest     {manifest}")
    print("ctrl-c to stop; the request audit is printed on exit")

    done = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: done.set())
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    done.wait()
    audit = mock.audit()
    mock.stop()
    print(f"{mock.count()} requests, {len(audit.rate_violations)} rate violations, "
          f"max concurrent GET {audit.max_get}, HEAD {audit.max_head}, "
          f"requests after queue full {audit.requests_after_queue_full}")


if __name__ == "__main__":
    main()
