#!/usr/bin/env python3
"""End-to-end run against a fresh mock, reporting traffic compliance.

collect -> sync (converted, previous, unconverted) -> advance virtual time by T
-> collect -> sync converted -> enrich, then a second sync to confirm the
HEAD-only steady state. Prints one JSON object with the counters.

    python scripts/run_e2e.py --volumes 500            # about three minutes at 5 req/s
    python scripts/run_e2e.py --volumes 200 --rate 100 # quick look, unrealistic pacing
"""

from __future__ import annotations

import argparse
import json
import logging
import tempfile
import time
from pathlib import Path

from grin_transfer.config import RunConfig, SecretRef, StorageRef
from grin_transfer.mock import MockCorpusSpec, MockGrin, generate_corpus
from grin_transfer.orchestrator import QueueSpec, run_collect, run_enrich, run_sync
from grin_transfer.protocol import RateBudget


def build_config(work: Path, mock: MockGrin, rate: float) -> RunConfig:
    (work / "token").write_text(mock.spec.token)
    (work / "passphrase").write_text(mock.spec.passphrase)
    return RunConfig(
        library_directory=mock.spec.library_directory,
        credentials_ref=SecretRef("token", "GRIN_E2E_TOKEN", work / "token"),
        passphrase_ref=SecretRef("passphrase", "GRIN_E2E_PASSPHRASE", work / "passphrase"),
        storage=StorageRef(root=work / "storage"),
        grin_base_url=mock.url,
        store_path=work / "state" / "grin-transfer.db",
        staging_root=work / "staging",
        staging_poll_interval=0.1,
        rate=RateBudget(rate, max(1, int(rate))),
    )


def outcome_counts(report) -> dict[str, int]:
    return {k.value: v for k, v in sorted(report.outcomes().items())}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--volumes", type=int, default=500)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--rate", type=float, default=5.0)
    ap.add_argument("--cap", type=int, default=50)
    ap.add_argument("--work", type=Path, help="keep state here instead of a temp dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    spec = MockCorpusSpec(volume_count=args.volumes, seed=args.seed, initial_state_mix=(0.4, 0.4, 0.2),
                          conversion_cap=args.cap, rate_limit=args.rate, rate_burst=max(1, int(args.rate)))
    work = args.work or Path(tempfile.mkdtemp(prefix="grin-e2e-"))
    work.mkdir(parents=True, exist_ok=True)

    with MockGrin(generate_corpus(spec)) as mock:
        config = build_config(work, mock, args.rate)
        t0 = time.monotonic()
        run_collect(config)
        first = run_sync(config, QueueSpec.build(["converted", "previous", "unconverted"]))
        mock.advance_time(spec.latency_t)
        run_collect(config)
        second = run_sync(config, QueueSpec.build(["converted"]))
        run_enrich(config)
        elapsed = time.monotonic() - t0
        audit = mock.audit()

        mark = mock.mark()
        steady = run_sync(config, QueueSpec.build(["converted"]))
        print(json.dumps({
            "work_dir": str(work),
            "volumes": args.volumes,
            "elapsed_s": round(elapsed, 1),
            "requests": mark,
            "rate_violations": len(audit.rate_violations),
            "requests_after_queue_full": audit.requests_after_queue_full,
            "max_concurrent_get": audit.max_get,
            "max_concurrent_head": audit.max_head,
            "first_sync": outcome_counts(first),
            "after_T_sync": outcome_counts(second),
            "steady_state": outcome_counts(steady),
            "steady_state_gets": mock.count("package_get", since=mark),
            "server_states": {k.value: v for k, v in sorted(mock.states().items())},
        }, indent=2))


if __name__ == "__main__":
    main()
