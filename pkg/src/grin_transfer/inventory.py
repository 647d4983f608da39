"""The collect stage: page through the server listing into the store.

Each page is committed together with the cursor that follows it, so an
interrupted pass resumes at the first page not yet stored.
"""

from __future__ import annotations

import logging

from .protocol import GrinClient
from .store import RunSummary, VolumeStore

log = logging.getLogger(__name__)

CURSOR_KEY = "collect.cursor"
SEEN_KEY = "collect.pass_started"
PAGES_KEY = "collect.pages"


def collect(client: GrinClient, store: VolumeStore, summary: RunSummary | None = None, page_size: int | None = None) -> RunSummary:
    summary = summary or RunSummary("collect")
    cursor = store.get_meta(CURSOR_KEY)
    pass_id = store.get_meta(SEEN_KEY) if cursor else None
    if pass_id:
        log.info("resuming listing pass at saved cursor")
    else:
        cursor = None
        pass_id = summary.run_id
        store.set_meta(SEEN_KEY, pass_id)
    pages = int(store.get_meta(PAGES_KEY) or 0) if cursor else 0
    while True:
        listings, nxt = client.list_books_page(cursor, page_size)
        with store.transaction() as conn:
            store.upsert_volumes(listings, conn)
            conn.executemany(
                "INSERT OR REPLACE INTO meta (key, value) VALUES (?, ?)",
                [("collect.seen." + item.barcode, pass_id) for item in listings],
            )
            store.set_meta(CURSOR_KEY, nxt, conn)
            store.set_meta(PAGES_KEY, str(pages + 1) if nxt else None, conn)
        pages += 1
        summary.incr("collected", len(listings))
        log.info("collected page %d (%d volumes)", pages, len(listings))
        if not nxt:
            break
        cursor = nxt
    _finish_pass(store, summary)
    return summary


def _finish_pass(store: VolumeStore, summary: RunSummary) -> None:
    """Flag rows the completed pass never saw, then drop the per-pass bookkeeping."""
    pass_id = store.get_meta(SEEN_KEY)
    rows = store.query("SELECT key, value FROM meta WHERE key LIKE 'collect.seen.%'")
    present = {r["key"][len("collect.seen."):] for r in rows if r["value"] == pass_id}
    flagged = store.mark_missing(present)
    with store.transaction() as conn:
        conn.execute("DELETE FROM meta WHERE key LIKE 'collect.seen.%'")
        store.set_meta(SEEN_KEY, None, conn)
    if flagged:
        log.warning("%d volumes no longer appear in the listing; flagged missing_from_listing", flagged)
