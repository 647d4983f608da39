"""Global request limiter and retry backoff for GRIN traffic.

The limiter is a sliding window over *completed* exchanges: a permit stays
charged against the window while its request is in flight and for one window
length after the response headers arrive. Because the server necessarily sees
a request before it answers, no more than ``capacity`` requests can reach the
server inside any window, whatever the network or scheduling jitter.
"""

from __future__ import annotations

import collections
import contextlib
import random
import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterator


class RateLimitTimeout(TimeoutError):
    """No permit became available before the caller's deadline."""


@dataclass(frozen=True)
class RateBudget:
    max_requests_per_second: Fraction | float = 5
    burst: int = 5

    def __post_init__(self):
        if self.max_requests_per_second <= 0:
            raise ValueError("max_requests_per_second must be positive")
        if self.burst < 1:
            raise ValueError("burst must be a positive integer")

    @property
    def window(self) -> float:
        """Seconds over which at most ``burst`` grants are allowed."""
        return float(Fraction(self.burst) / Fraction(self.max_requests_per_second))


class SlidingWindow:
    """Clock-free core of the limiter, so it can be simulated deterministically."""

    def __init__(self, budget: RateBudget):
        self.budget = budget
        self.in_flight = 0
        self._released: collections.deque[float] = collections.deque()

    def _expire(self, now: float) -> None:
        horizon = now - self.budget.window
        while self._released and self._released[0] <= horizon:
            self._released.popleft()

    def charged(self, now: float) -> int:
        self._expire(now)
        return self.in_flight + len(self._released)

    def try_grant(self, now: float) -> float | None:
        """Grant and return None, or return how long to wait (inf: wait for a release)."""
        self._expire(now)
        if self.in_flight + len(self._released) < self.budget.burst:
            self.in_flight += 1
            return None
        if not self._released:
            return float("inf")
        return self._released[0] + self.budget.window - now

    def release(self, now: float) -> None:
        if self.in_flight <= 0:
            raise RuntimeError("release without a matching grant")
        self.in_flight -= 1
        self._released.append(now)


class RateLimiter:
    """Thread-safe blocking limiter shared by every GRIN request."""

    def __init__(self, budget: RateBudget | None = None, clock: Callable[[], float] = time.monotonic):
        self.budget = budget or RateBudget()
        self._clock = clock
        self._window = SlidingWindow(self.budget)
        self._cond = threading.Condition()
        self.grants = 0

    def acquire(self, timeout: float | None = None) -> None:
        deadline = None if timeout is None else self._clock() + timeout
        with self._cond:
            while True:
                now = self._clock()
                wait = self._window.try_grant(now)
                if wait is None:
                    self.grants += 1
                    return
                if deadline is not None:
                    remaining = deadline - now
                    if remaining <= 0:
                        raise RateLimitTimeout(f"no GRIN request permit within {timeout}s")
                    wait = min(wait, remaining)
                self._cond.wait(None if wait == float("inf") else wait)

    def release(self) -> None:
        with self._cond:
            self._window.release(self._clock())
            self._cond.notify_all()

    def drain(self, timeout: float | None = None) -> bool:
        """Block until no permit is charged, so whatever runs next starts with a
        fresh window. Returns False if ``timeout`` ran out first."""
        deadline = None if timeout is None else self._clock() + timeout
        with self._cond:
            while True:
                now = self._clock()
                if self._window.charged(now) == 0:
                    return True
                waits = [self.budget.window]
                if self._window._released and not self._window.in_flight:
                    waits = [self._window._released[-1] + self.budget.window - now]
                if deadline is not None:
                    if deadline <= now:
                        return False
                    waits.append(deadline - now)
                self._cond.wait(max(min(waits), 0.001))

    @contextlib.contextmanager
    def permit(self, timeout: float | None = None) -> Iterator[None]:
        self.acquire(timeout)
        try:
            yield
        finally:
            self.release()


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with full jitter."""

    base: float = 1.0
    factor: float = 2.0
    cap: float = 60.0
    max_attempts: int = 6

    def delay(self, attempt: int, rng: random.Random | None = None) -> float:
        """Sleep before retry number ``attempt`` (1 = first retry)."""
        ceiling = min(self.cap, self.base * self.factor ** (attempt - 1))
        return (rng or random).uniform(0, ceiling)
