from __future__ import annotations

import threading
import time

import numpy as np
import pytest

from hindsight import codec
from hindsight.errors import QueueClosedError
from hindsight.materializer import BackgroundMaterializer, SnapshotBatch
from hindsight.store import open_run


@pytest.fixture
def handle(run_dir):
    h = open_run(run_dir, "r1")
    yield h
    h.close()


def batch(block, index, **values):
    return SnapshotBatch([(block, index, list(values.items()))])


@pytest.mark.parametrize("background", [True, False])
def test_submit_then_flush_is_readable(handle, background):
    m = BackgroundMaterializer(handle, background=background)
    m.submit(batch("b", 0, w=np.arange(3.0)), dispatch=True)
    status = m.flush()
    assert status.as_tuple() == (0, 1, 0)
    np.testing.assert_array_equal(codec.from_record(handle.get_checkpoint("b", 0)[0]), np.arange(3.0))


def test_flush_without_submits(handle):
    assert BackgroundMaterializer(handle).flush().as_tuple() == (0, 0, 0)


def test_flush_after_many_submits(handle):
    m = BackgroundMaterializer(handle)
    for i in range(25):
        m.submit(batch("b", i, x=float(i)), dispatch=i % 3 == 0)
    assert m.flush().as_tuple() == (0, 25, 0)
    assert handle.list_checkpoints("b") == list(range(25))


def test_object_threshold_triggers_dispatch(handle):
    m = BackgroundMaterializer(handle, batch_threshold=5000)
    items = [(f"v{i}", float(i)) for i in range(4999)]
    m.submit(SnapshotBatch([("b", 0, items)]))
    assert m.dispatches == 0
    assert m.pending_objects == 4999
    m.submit(batch("c", 0, last=1.0))
    assert m.dispatches == 1
    assert m.pending_objects == 0
    m.flush()
    assert handle.has_checkpoint("b", 0) and handle.has_checkpoint("c", 0)


def test_snapshot_is_isolated_from_mutation(handle):
    m = BackgroundMaterializer(handle, batch_threshold=10**6)
    w = np.zeros(4)
    state = {"inner": np.ones(2)}
    m.submit(batch("b", 0, w=w, state=state))
    w[:] = 7.0
    state["inner"][:] = 7.0
    m.flush()
    got = {r.name: codec.from_record(r) for r in handle.get_checkpoint("b", 0)}
    np.testing.assert_array_equal(got["w"], np.zeros(4))
    np.testing.assert_array_equal(got["state"]["inner"], np.ones(2))


def test_submit_after_flush_is_refused(handle):
    m = BackgroundMaterializer(handle)
    m.flush()
    with pytest.raises(QueueClosedError):
        m.submit(batch("b", 0, x=1.0))


class FlakyStore:
    """Delegates to a real handle but fails one chosen entry."""

    def __init__(self, inner, bad):
        self.inner = inner
        self.bad = bad

    def put_encoded(self, block_id, index, payload, dig):
        if (block_id, index) == self.bad:
            raise OSError("disk full")
        return self.inner.put_encoded(block_id, index, payload, dig)

    def flush(self):
        self.inner.flush()


@pytest.mark.parametrize("background", [True, False])
def test_failed_write_is_reported_at_flush(handle, background):
    m = BackgroundMaterializer(FlakyStore(handle, ("b", 2)), background=background)
    for i in range(4):
        m.submit(batch("b", i, x=float(i)), dispatch=True)
    status = m.flush()
    assert status.failed == 1 and status.completed == 3
    assert status.errors[0].block_id == "b" and status.errors[0].execution_index == 2
    assert "b[2]" in str(status.errors[0])
    assert handle.list_checkpoints("b") == [0, 1, 3]


class SlowStore:
    """Records how many writes overlap."""

    def __init__(self, inner, delay):
        self.inner = inner
        self.delay = delay
        self.active = 0
        self.peak = 0
        self.order = []
        self._lock = threading.Lock()

    def put_encoded(self, block_id, index, payload, dig):
        with self._lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(self.delay)
        with self._lock:
            self.active -= 1
            self.order.append((block_id, index))
        return self.inner.put_encoded(block_id, index, payload, dig)

    def flush(self):
        self.inner.flush()


def test_in_flight_never_exceeds_bound_and_order_is_kept(handle):
    store = SlowStore(handle, 0.002)
    m = BackgroundMaterializer(store, bound=2)
    samples = []
    for i in range(40):
        m.submit(batch("b", i, x=float(i)), dispatch=True)
        samples.append(m.status().in_flight)
    m.flush()
    assert max(samples) <= 2
    assert m.max_in_flight <= 2
    assert store.order == [("b", i) for i in range(40)]


def test_submit_latency_excludes_serialization(run_dir):
    big = np.random.default_rng(0).standard_normal(10 * 2**20 // 8)
    small = np.zeros(128)

    def best_submit(m, value, start, reps=4):
        out = float("inf")
        for i in range(reps):
            t0 = time.perf_counter()
            m.submit(batch("b", start + i, x=value), dispatch=True)
            out = min(out, time.perf_counter() - t0)
        return out

    with open_run(run_dir, "bg") as h:
        bg = BackgroundMaterializer(h, bound=2)
        t_small = best_submit(bg, small, 0)
        t_big = best_submit(bg, big, 10)
        bg.flush()
    with open_run(run_dir, "sync") as h:
        sync = BackgroundMaterializer(h, background=False)
        t_sync_big = float("inf")
        for i in range(4):
            t0 = time.perf_counter()
            sync.submit(batch("b", i, x=big), dispatch=True)
            t_sync_big = min(t_sync_big, time.perf_counter() - t0)
        sync.flush()
    # the caller pays for the copy, not for encoding, hashing and writing
    assert t_big < 0.5 * t_sync_big
    assert t_big / t_small < t_sync_big / t_small
