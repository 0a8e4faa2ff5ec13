from __future__ import annotations

import numpy as np
import pytest

from hindsight import codec
from hindsight.errors import MissingCheckpointError, NestingViolationError, SlotMismatchError
from hindsight.materializer import BackgroundMaterializer
from hindsight.policy import PolicyParams
from hindsight.runtime import LOG_SLOT, BlockMode, Decision, SideEffectSet, SkipBlockRuntime
from hindsight.store import open_run


class ManualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def advance(self, seconds):
        self.now += seconds


class Model:
    def __init__(self):
        self.w = np.zeros(4)

    def state_dict(self):
        return {"w": self.w}

    def load_state_dict(self, state):
        self.w[...] = state["w"]


@pytest.fixture
def handle(run_dir):
    h = open_run(run_dir, "r1")
    yield h
    h.close()


def recorder(handle, clock=None, policy="adaptive", **kw):
    m = BackgroundMaterializer(handle, background=False)
    kwargs = dict(store=handle, materializer=m, policy=policy, charge_background=False, **kw)
    if clock is not None:
        kwargs["clock"] = clock
    return SkipBlockRuntime("record", **kwargs)


def run_block(rt, block, effects, clock=None, cost=1.0, body=None):
    decision = rt.block_begin(block, effects)
    if decision is Decision.EXECUTE:
        if body:
            body()
        if clock:
            clock.advance(cost)
        rt.block_end(block, effects)
    return decision


def test_record_always_executes(handle):
    rt = recorder(handle, policy="never")
    ns = {"x": 1.0}
    assert run_block(rt, "b", SideEffectSet(ns, ["x"])) is Decision.EXECUTE
    assert rt.modes_seen == [("b", 0, BlockMode.RECORD_EXECUTE)]


@pytest.mark.parametrize(
    "projected, executions, expect_k",
    [(0.01, 1, 1), (0.5, 1, 0)],
)
def test_first_decision_examples(handle, projected, executions, expect_k):
    clock = ManualClock()
    rt = recorder(handle, clock)
    rt.block_stats("b").calibration = projected
    ns = {"x": np.zeros(2)}
    for _ in range(executions):
        run_block(rt, "b", SideEffectSet(ns, ["x"]), clock, cost=1.0)
    st = rt.block_stats("b")
    assert (st.n, st.k) == (executions, expect_k)


def test_ratio_half_waits_until_enough_executions(handle):
    clock = ManualClock()
    rt = recorder(handle, clock)
    rt.block_stats("b").calibration = 0.5
    ns = {"x": np.zeros(2)}
    first = None
    for n in range(1, 12):
        run_block(rt, "b", SideEffectSet(ns, ["x"]), clock, cost=1.0)
        if first is None and rt.block_stats("b").k:
            first = n
    # 0.5 < n * 0.0667 first holds at n = 8, and certainly by n = 10
    assert first == 8


def test_always_and_never_policies(handle):
    rt = recorder(handle, policy="always")
    ns = {"x": 1.0}
    for _ in range(3):
        run_block(rt, "a", SideEffectSet(ns, ["x"]))
    rt.finish()
    assert handle.list_checkpoints("a") == [0, 1, 2]
    assert rt.block_stats("a").k == 3


def test_stats_invariants_on_real_clock(handle):
    rt = recorder(handle)
    ns = {"w": np.zeros(64)}
    for i in range(30):
        run_block(rt, "b", SideEffectSet(ns, ["w"]), body=lambda: np.linalg.norm(np.ones(20000)))
        st = rt.block_stats("b")
        assert 0 <= st.k <= st.n == i + 1
        assert st.sum_C >= 0 and st.sum_M >= 0
    rt.finish()
    assert handle.list_checkpoints("b") == rt.block_stats("b").checkpoint_indices


def test_unknown_effects_never_checkpoint(handle):
    rt = recorder(handle, policy="always")
    run_block(rt, "b", None)
    assert rt.block_stats("b").k == 0
    assert handle.list_checkpoints("b") == []


def test_nesting_violations(handle):
    rt = recorder(handle, policy="never")
    rt.block_begin("outer", None)
    rt.block_begin("inner", None)
    with pytest.raises(NestingViolationError):
        rt.block_end("outer", None)
    with pytest.raises(NestingViolationError):
        rt.block_begin("inner", None)
    rt.block_end("inner", None)
    rt.block_end("outer", None)
    with pytest.raises(NestingViolationError):
        rt.block_end("outer", None)


def _stored(run_dir, entries):
    h = open_run(run_dir, "src")
    for (block, idx), values in entries.items():
        h.put_checkpoint(block, idx, [codec.to_record(k, v) for k, v in values.items()])
    h.seal()
    h.close()
    return open_run(run_dir, "src", mode="replay")


def test_replay_skip_restores_in_place(run_dir):
    h = _stored(run_dir, {("b", 0): {"model": {"w": np.arange(4.0)}, "steps": 5}})
    model = Model()
    alias = model.w
    ns = {"model": model, "steps": 0}
    rt = SkipBlockRuntime("replay", store=h)
    effects = SideEffectSet(ns, ["model", "steps"])
    assert rt.block_begin("b", effects) is Decision.SKIP
    np.testing.assert_array_equal(alias, np.arange(4.0))
    assert ns["steps"] == 5
    st = rt.block_stats("b")
    assert st.restores == 1 and st.skipped == 1 and st.sum_R >= 0
    assert rt.execution_index("b") == 1
    # no entry at index 1: the default provider steps into the block
    assert rt.block_begin("b", effects) is Decision.EXECUTE
    rt.block_end("b", effects)
    h.close()


def test_probed_block_executes_even_with_entry(run_dir):
    h = _stored(run_dir, {("b", 0): {"x": 1.0}})
    rt = SkipBlockRuntime("replay", store=h, mode_provider=lambda b, i: BlockMode.REPLAY_STEP)
    ns = {"x": 0.0}
    assert rt.block_begin("b", SideEffectSet(ns, ["x"])) is Decision.EXECUTE
    assert ns["x"] == 0.0
    h.close()


def test_slot_mismatch(run_dir):
    h = _stored(run_dir, {("b", 0): {"model": 1.0}})
    rt = SkipBlockRuntime("replay", store=h)
    ns = {"model": 0.0, "sched": 0.0}
    with pytest.raises(SlotMismatchError):
        rt.block_begin("b", SideEffectSet(ns, ["model", "sched"]))
    h.close()


def test_skip_without_checkpoint_is_a_planning_bug(run_dir):
    h = _stored(run_dir, {})
    rt = SkipBlockRuntime("replay", store=h, mode_provider=lambda b, i: BlockMode.REPLAY_SKIP)
    with pytest.raises(MissingCheckpointError):
        rt.block_begin("b", SideEffectSet({"x": 1}, ["x"]))
    with pytest.raises(MissingCheckpointError):
        rt.block_begin("c", None)
    h.close()


def test_captured_logs_are_replayed_on_skip(run_dir):
    h = open_run(run_dir, "r1")
    rt = recorder(h, policy="always")
    ns = {"x": 0.0}
    effects = SideEffectSet(ns, ["x"])
    for _ in rt.skip_block("b", effects):
        rt.capture_log("line one")
        ns["x"] = 3.0
        rt.capture_log("line two")
    rt.finish()
    names = [r.name for r in h.get_checkpoint("b", 0)]
    assert names == ["x", LOG_SLOT]
    h.seal()
    h.close()

    seen = []
    with open_run(run_dir, "r1", mode="replay") as r:
        rt2 = SkipBlockRuntime("replay", store=r)
        rt2.on_restored_logs = lambda block, idx, text: seen.append((block, idx, text))
        ns2 = {"x": 0.0}
        ran = [None for _ in rt2.skip_block("b", SideEffectSet(ns2, ["x"]))]
        assert ran == [] and ns2["x"] == 3.0
    assert seen == [("b", 0, "line one\nline two")]


def test_nested_blocks_capture_inner_logs_too(run_dir):
    h = open_run(run_dir, "r1")
    rt = recorder(h, policy="always")
    ns = {"x": 0.0, "y": 0.0}
    for _ in rt.skip_block("outer", SideEffectSet(ns, ["x"])):
        rt.capture_log("before")
        for _ in rt.skip_block("inner", SideEffectSet(ns, ["y"])):
            rt.capture_log("inside")
    rt.finish()
    outer = {r.name: r for r in h.get_checkpoint("outer", 0)}
    inner = {r.name: r for r in h.get_checkpoint("inner", 0)}
    assert outer[LOG_SLOT].payload == b"before\ninside"
    assert inner[LOG_SLOT].payload == b"inside"
    h.close()


def test_side_effect_set_validation():
    with pytest.raises(ValueError):
        SideEffectSet({}, ["a", "a"])
    with pytest.raises(ValueError):
        SideEffectSet({}, [LOG_SLOT])
    with pytest.raises(SlotMismatchError):
        SideEffectSet({}, ["a"]).items()


def test_apply_rebinds_when_shapes_differ():
    arr = np.zeros(3)
    ns = {"a": arr}
    SideEffectSet(ns, ["a"]).apply("a", np.ones(5))
    assert ns["a"].shape == (5,) and arr.sum() == 0


def test_invalid_phase_and_policy():
    with pytest.raises(ValueError):
        SkipBlockRuntime("play")
    with pytest.raises(ValueError):
        SkipBlockRuntime("record", policy="sometimes")


def test_background_charge_follows_materializer_mode(handle):
    sync = BackgroundMaterializer(handle, background=False)
    assert not SkipBlockRuntime("record", materializer=sync, charge_background=True).charge_background
    bg = BackgroundMaterializer(handle)
    assert SkipBlockRuntime("record", materializer=bg, charge_background=True).charge_background
    bg.flush()


def test_record_overhead_invariant_after_each_checkpoint(handle):
    params = PolicyParams()
    rt = recorder(handle, params=params)
    ns = {"w": np.zeros(2048)}
    for _ in range(40):
        before = rt.block_stats("b").k
        run_block(rt, "b", SideEffectSet(ns, ["w"]), body=lambda: np.linalg.norm(np.ones(50000)))
        st = rt.block_stats("b")
        if st.k > before:
            # critical-path materialization stays within the tolerance
            assert st.sum_M_critical / st.sum_C < st.n * params.epsilon / st.k + 0.05


class GatedStore:
    """Store wrapper whose writes wait until the test opens the gate."""

    def __init__(self, inner):
        import threading

        self.inner = inner
        self.gate = threading.Event()

    def put_encoded(self, *args):
        self.gate.wait(10)
        return self.inner.put_encoded(*args)

    def flush(self):
        self.inner.flush()


def test_in_flight_writes_count_at_projected_cost(handle):
    clock = ManualClock()
    store = GatedStore(handle)
    m = BackgroundMaterializer(store, background=True)
    rt = SkipBlockRuntime("record", store=handle, materializer=m, charge_background=True, clock=clock)
    rt.block_stats("b").calibration = 0.5
    ns = {"x": np.zeros(4)}
    for _ in range(9):
        run_block(rt, "b", SideEffectSet(ns, ["x"]), clock, cost=1.0)
    # first checkpoint at n=8; at n=9 a zero-priced pending write would allow a second
    assert rt.block_stats("b").checkpoint_indices == [7]
    store.gate.set()
    rt.finish()
