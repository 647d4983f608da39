"""Cross-process session lock so overlapping cron invocations skip instead of racing.

The lock is a JSON file next to the store holding the owner's pid, host and
start time. Creation uses O_EXCL, so exactly one of several simultaneous
acquirers wins. A lock whose owner is gone and which is older than the
staleness threshold is reclaimed with a warning.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import time
import uuid
from pathlib import Path

log = logging.getLogger(__name__)

DEFAULT_STALE_AFTER = 24 * 3600.0


class AlreadyLocked(Exception):
    def __init__(self, path: Path, owner: dict | None):
        self.path = path
        self.owner = owner or {}
        super().__init__(f"{path} is held by pid {self.owner.get('pid')} since {self.owner.get('started_at')}")


def lock_path_for(store_path: Path | str) -> Path:
    return Path(f"{store_path}.lock")


def _pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    # a zombie still answers kill(0); treat it as dead
    try:
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().split(")")[-1].split()[0] != "Z"
    except OSError:
        return True


def read_owner(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


class SessionLock:
    """Context manager guarding one store path.

    >>> with SessionLock("grin-transfer.db"):
    ...     run()
    """

    def __init__(self, store_path: Path | str, stale_after: float = DEFAULT_STALE_AFTER):
        self.path = lock_path_for(store_path)
        self.stale_after = stale_after
        self.token = uuid.uuid4().hex
        self.held = False

    def _owner_record(self) -> dict:
        return {"pid": os.getpid(), "host": socket.gethostname(), "started_at": time.time(), "token": self.token}

    def _is_stale(self, owner: dict | None) -> bool:
        try:
            age = time.time() - self.path.stat().st_mtime
        except FileNotFoundError:
            return False
        if owner is None:
            # unreadable: a writer may be mid-create, so only trust age
            return age >= max(self.stale_after, 1.0)
        if owner.get("host") != socket.gethostname():
            return False
        return age >= self.stale_after and not _pid_alive(int(owner.get("pid", -1)))

    def acquire(self) -> "SessionLock":
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                owner = read_owner(self.path)
                if not self._is_stale(owner):
                    raise AlreadyLocked(self.path, owner)
                # move the stale file aside atomically; only one reclaimer wins the rename
                aside = self.path.with_name(f"{self.path.name}.stale-{self.token}")
                try:
                    os.rename(self.path, aside)
                except FileNotFoundError:
                    continue
                if read_owner(aside) != owner:
                    # someone replaced the lock between our read and rename; put it back
                    os.rename(aside, self.path)
                    raise AlreadyLocked(self.path, read_owner(self.path))
                aside.unlink()
                log.warning("reclaimed stale session lock %s (owner pid %s)", self.path, (owner or {}).get("pid"))
                continue
            with os.fdopen(fd, "w") as fh:
                json.dump(self._owner_record(), fh)
            self.held = True
            return self
        raise AlreadyLocked(self.path, read_owner(self.path))

    def release(self) -> None:
        if not self.held:
            return
        owner = read_owner(self.path)
        if owner and owner.get("token") == self.token:
            self.path.unlink()
        self.held = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


def wait_for_lock(store_path: Path | str, deadline: float, poll: float = 0.1, stale_after: float = DEFAULT_STALE_AFTER) -> SessionLock:
    """Acquire, retrying until ``deadline`` seconds have passed."""
    end = time.monotonic() + deadline
    while True:
        try:
            return SessionLock(store_path, stale_after).acquire()
        except AlreadyLocked:
            if time.monotonic() >= end:
                raise
            time.sleep(poll)
