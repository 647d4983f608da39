import heapq
import math
import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grin_transfer.protocol import RateBudget, RateLimiter, RateLimitTimeout, RetryPolicy, SlidingWindow


def max_in_window(times, window=1.0):
    """Brute force: most arrivals inside any half-open window [t, t + window)."""
    times = sorted(times)
    best = 0
    for i, t in enumerate(times):
        best = max(best, sum(1 for u in times[i:] if u < t + window))
    return best


def simulate(latencies, arrival_fracs, workers, budget):
    """Discrete-event run of ``workers`` clients issuing requests back to back.

    Each request is granted, reaches the server at some point between grant and
    response (``arrival_fracs`` picks where), and releases on response.
    Returns the server-side arrival times.
    """
    win = SlidingWindow(budget)
    jobs = list(zip(latencies, arrival_fracs))
    events = [(0.0, 0, "want", w) for w in range(workers)]
    seq = 1
    arrivals = []
    waiting = []
    while events:
        now, _, kind, worker = heapq.heappop(events)
        if kind == "release":
            win.release(now)
            retry, waiting = waiting, []
            for w in retry:
                heapq.heappush(events, (now, seq, "want", w)); seq += 1
            if jobs:
                heapq.heappush(events, (now, seq, "want", worker)); seq += 1
            continue
        if not jobs:
            continue
        wait = win.try_grant(now)
        if wait is None:
            latency, frac = jobs.pop()
            arrivals.append(now + latency * frac)
            heapq.heappush(events, (now + latency, seq, "release", worker)); seq += 1
        elif wait == float("inf"):
            waiting.append(worker)
        else:
            # float rounding can leave now + wait == now; step to the next representable time
            at = max(now + wait, math.nextafter(now, math.inf))
            heapq.heappush(events, (at, seq, "want", worker)); seq += 1
    return arrivals


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(
        st.tuples(st.floats(0.0, 2.0), st.floats(0.0, 1.0)),
        min_size=1,
        max_size=80,
    ),
    workers=st.integers(1, 12),
)
def test_server_never_sees_more_than_five_per_second(data, workers):
    latencies, fracs = zip(*data)
    arrivals = simulate(list(latencies), list(fracs), workers, RateBudget(5, 5))
    assert len(arrivals) == len(data)
    assert max_in_window(arrivals) <= 5


def test_zero_latency_requests_pace_at_window():
    arrivals = simulate([0.0] * 12, [0.0] * 12, 4, RateBudget(5, 5))
    assert arrivals[:5] == [0.0] * 5
    assert arrivals[5] == pytest.approx(1.0)
    assert max_in_window(arrivals) == 5


def test_sliding_window_reports_wait():
    w = SlidingWindow(RateBudget(5, 5))
    for _ in range(5):
        assert w.try_grant(0.0) is None
    assert w.try_grant(0.1) == float("inf")
    w.release(0.2)
    assert w.try_grant(0.3) == pytest.approx(0.9)  # four in flight, one charged until 1.2
    for _ in range(4):
        w.release(0.4)
    assert w.try_grant(0.5) == pytest.approx(0.7)
    assert w.try_grant(1.25) is None
    with pytest.raises(RuntimeError):
        SlidingWindow(RateBudget()).release(0.0)


def test_threaded_limiter_respects_window():
    limiter = RateLimiter(RateBudget(20, 5))  # 0.25 s window keeps the test short
    stamps = []
    lock = threading.Lock()

    def worker():
        for _ in range(6):
            with limiter.permit():
                with lock:
                    stamps.append(time.monotonic())
                time.sleep(random.uniform(0, 0.01))

    threads = [threading.Thread(target=worker) for _ in range(5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert limiter.grants == 30
    assert max_in_window(stamps, 0.25) <= 5


def test_acquire_timeout():
    limiter = RateLimiter(RateBudget(1, 1))
    limiter.acquire()
    with pytest.raises(RateLimitTimeout):
        limiter.acquire(timeout=0.05)


def test_budget_validation():
    assert RateBudget().window == 1.0
    with pytest.raises(ValueError):
        RateBudget(0, 5)
    with pytest.raises(ValueError):
        RateBudget(5, 0)


@given(attempt=st.integers(1, 30), seed=st.integers(0, 2**32))
def test_retry_delay_bounds(attempt, seed):
    p = RetryPolicy()
    d = p.delay(attempt, random.Random(seed))
    assert 0 <= d <= min(60.0, 2.0 ** (attempt - 1))


def test_drain_waits_for_window_to_empty():
    limiter = RateLimiter(RateBudget(25, 5))  # 0.2 s window
    for _ in range(3):
        with limiter.permit():
            pass
    assert limiter.drain(timeout=0.01) is False
    start = time.monotonic()
    assert limiter.drain() is True
    assert 0.1 < time.monotonic() - start < 0.3
    assert limiter.drain(timeout=0) is True
