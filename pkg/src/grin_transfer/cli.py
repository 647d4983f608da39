"""``grin-transfer`` command line.

Exit codes: 0 success (individual volume failures included), 75 skipped
because another run holds the lock, 78 configuration error, 70 systemic abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .config import ConfigError, load_config
from .lock import AlreadyLocked
from .orchestrator import (
    EXIT_CONFIG,
    EXIT_LOCKED,
    EXIT_OK,
    EXIT_SOFTWARE,
    QueueSpec,
    run_collect,
    run_enrich,
    run_export,
    run_sync,
    status,
)
from .protocol import CredentialError
from .store import StoreError

log = logging.getLogger("grin_transfer")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="DIR", help="config directory (default ~/.config/grin-transfer)")
    common.add_argument("--store", metavar="PATH", help="state store path (overrides the config file)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="grin-transfer", description="Mirror a GRIN collection into durable storage.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[common], help="page through the server listing into the store")

    sync = sub.add_parser("sync", help="conversion and download")
    sync_sub = sync.add_subparsers(dest="mode", required=True)
    pipe = sync_sub.add_parser("pipeline", parents=[common], help="process queues in order")
    pipe.add_argument("--queue", action="append", default=[], choices=["unconverted", "converted", "previous"],
                      help="repeatable; processed in the order given")
    pipe.add_argument("--barcode", action="append", default=[], help="repeatable explicit barcode")
    pipe.add_argument("--barcodes-file", metavar="PATH", help="text file with one barcode per row")
    pipe.add_argument("--limit", type=int, help="at most N volumes per queue")
    pipe.add_argument("--dry-run", action="store_true", help="probe only and print the planned actions")
    pipe.add_argument("--staging-threshold", type=float, help="pause downloads above this staging fill fraction")
    pipe.add_argument("--no-marc", action="store_true", help="skip MARC extraction")
    pipe.add_argument("--no-ocr", action="store_true", help="skip the OCR JSONL artifact")

    enrich = sub.add_parser("enrich", parents=[common], help="fetch condition metadata from the detail view")
    enrich.add_argument("--barcode", action="append", help="limit to these barcodes")

    export = sub.add_parser("export-csv", parents=[common], help="write every volume as CSV")
    export.add_argument("--csv", required=True, metavar="PATH", help="output file, or - for standard output")

    sub.add_parser("status", parents=[common], help="store counts, recent runs, lock holder")
    return parser


def _install_stop_handler() -> threading.Event:
    stop = threading.Event()

    def handler(signum, _frame):
        if stop.is_set():
            raise KeyboardInterrupt
        log.warning("received signal %d; finishing in-flight volumes (repeat to abort)", signum)
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    return stop


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {"store_path": Path(args.store) if args.store else None}
    if args.command == "sync":
        overrides["staging_threshold"] = args.staging_threshold
        if args.no_marc:
            overrides["extract_marc"] = False
        if args.no_ocr:
            overrides["extract_ocr"] = False
    try:
        config = load_config(args.config, overrides)
        if args.command == "collect":
            run_collect(config)
        elif args.command == "sync":
            queues = QueueSpec.build(args.queue, args.barcode, args.barcodes_file)
            if not queues:
                raise ConfigError("queue", "give at least one --queue, --barcode or --barcodes-file")
            report = run_sync(config, queues, limit=args.limit, dry_run=args.dry_run, stop=_install_stop_handler())
            if args.dry_run:
                for barcode, action in report.planned:
                    print(f"{barcode}\t{action}")
        elif args.command == "enrich":
            run_enrich(config, args.barcode)
        elif args.command == "export-csv":
            if args.csv == "-":
                n = run_export(config, sys.stdout)
            else:
                n = run_export(config, args.csv)
            log.info("exported %d rows", n)
        elif args.command == "status":
            print(json.dumps(status(config), indent=2, default=str))
    except AlreadyLocked as exc:
        log.warning("another run is active (%s); skipping", exc)
        return EXIT_LOCKED
    except (ConfigError, OSError, ValueError) as exc:
        if isinstance(exc, OSError) and not isinstance(exc, FileNotFoundError):
            log.error("%s", exc)
            return EXIT_SOFTWARE
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (CredentialError, StoreError) as exc:
        log.error("aborting: %s", exc)
        return EXIT_SOFTWARE
    except KeyboardInterrupt:
        log.error("aborted")
        return EXIT_SOFTWARE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
