"""Conversion requests and failure reconciliation.

Batches go out in order; the first 429 from the conversion endpoint ends
submission for the rest of the run, since the server queue only drains as
conversions finish.
"""

from __future__ import annotations

import logging
from typing import Sequence

from .protocol import GrinClient, GrinState
from .store import RunSummary, VolumeStore

log = logging.getLogger(__name__)

DEFAULT_BATCH = 100


def enqueue_conversions(
    client: GrinClient,
    store: VolumeStore,
    barcodes: Sequence[str],
    summary: RunSummary,
    batch_size: int = DEFAULT_BATCH,
    submitted: set[str] | None = None,
) -> tuple[int, bool]:
    """Returns (accepted count, stopped on queue full). ``submitted`` tracks
    barcodes already sent this run so none is sent twice."""
    if summary.queue_full_hit:
        return 0, True
    submitted = submitted if submitted is not None else set()
    pending = [b for b in dict.fromkeys(barcodes) if b not in submitted]
    requested = 0
    for i in range(0, len(pending), batch_size):
        batch = pending[i:i + batch_size]
        submitted.update(batch)
        result = client.request_conversion(batch)
        if result.accepted:
            store.set_state(result.accepted, GrinState.IN_PROCESS)
        requested += result.count
        summary.incr("conversion_requested", result.count)
        if result.queue_full:
            summary.queue_full_hit = True
            log.warning("conversion queue full after %d requests this run; no more submissions", requested)
            return requested, True
        log.info("conversion batch of %d submitted (%d accepted)", len(batch), result.count)
    return requested, False


def reconcile_failures(client: GrinClient, store: VolumeStore, summary: RunSummary | None = None) -> int:
    annotated = 0
    for barcode, reason in client.fetch_failures():
        if store.get(barcode) is None:
            log.warning("failures page lists %s, which is not in the store", barcode)
            continue
        store.record_error(barcode, "ConversionFailed", reason)
        store.set_state([barcode], GrinState.FAILED)
        annotated += 1
    if summary is not None:
        summary.incr("conversion_failed", annotated)
    if annotated:
        log.info("recorded %d conversion failures", annotated)
    return annotated
