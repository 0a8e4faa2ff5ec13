from __future__ import annotations

import json
import multiprocessing

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hindsight.errors import (
    CoverageError,
    MissingCheckpointError,
    NoLoopsError,
    ReplayPlanError,
    RunNotSealedError,
    UnknownProbeError,
)
from hindsight.execution import PSEUDORESUME, RESUME
from hindsight.logs import deferred_diff, read_log
from hindsight.replay import (
    merge_worker_logs,
    partition,
    plan_replay,
    read_worker_logs,
    record_scaling,
    replay_worker,
    run_workers,
    scaling_path,
    select_main_loop,
    worker_log_path,
)
from hindsight.runtime import BlockMode
from hindsight.store import open_run
from hindsight.workload import WorkloadSpec, record_run

from oracles import brute_force_partition

SPEC = WorkloadSpec(seed=3, epochs=6, steps_per_epoch=3, compute_cost=0.01, state_size=64)


@pytest.fixture(scope="module")
def recorded(tmp_path_factory):
    d = tmp_path_factory.mktemp("replay")
    report = record_run(SPEC, d, "full", policy="always", work_units=0, baseline=False)
    record_run(SPEC, d, "bare", policy="never", work_units=0, baseline=False)
    return d, report


def manifest(directory, run_id):
    with open_run(directory, run_id, mode="replay") as h:
        return h.manifest


# -- partition ----------------------------------------------------------------


def test_partition_examples():
    assert partition(6, 4) == [(0, 2), (2, 4), (4, 5), (5, 6)]
    sizes = [hi - lo for lo, hi in partition(200, 16)]
    assert max(sizes) == 13 and sum(sizes) == 200
    assert partition(3, 5) == [(0, 1), (1, 2), (2, 3), (3, 3), (3, 3)]
    with pytest.raises(ValueError):
        partition(0, 2)
    with pytest.raises(ValueError):
        partition(5, 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 500), st.integers(1, 64))
def test_partition_matches_brute_force(epochs, workers):
    ranges = partition(epochs, workers)
    assert ranges == brute_force_partition(epochs, workers)
    sizes = [hi - lo for lo, hi in ranges]
    assert max(sizes) - min(sizes) <= 1


def test_select_main_loop():
    assert select_main_loop({"a": 5.0, "b": 5.0}, {"a": 0, "b": 1}) == "a"
    assert select_main_loop({"a": 1.0, "b": 5.0}, {"a": 0, "b": 1}) == "b"
    with pytest.raises(NoLoopsError):
        select_main_loop({})


# -- planning -----------------------------------------------------------------


def test_plan_pseudoresume_modes(recorded):
    d, _ = recorded
    plan = plan_replay(manifest(d, "full"), "outer", PSEUDORESUME, pid=1, nparts=4)
    assert plan.epoch_range == (2, 4)
    assert plan.per_epoch_modes == {
        0: BlockMode.REPLAY_SKIP,
        1: BlockMode.REPLAY_SKIP,
        2: BlockMode.REPLAY_STEP,
        3: BlockMode.REPLAY_STEP,
    }
    assert plan.probe_loop == "synthetic:L0" and plan.probe_blocks == frozenset()


def test_plan_inner_probe_steps_block_in_range(recorded):
    d, _ = recorded
    plan = plan_replay(manifest(d, "full"), "inner", pid=1, nparts=2)
    block = "synthetic:L1"
    assert plan.block_mode(block, 0, True) is BlockMode.REPLAY_SKIP
    assert plan.block_mode(block, 3, True) is BlockMode.REPLAY_STEP
    assert plan.block_mode(block, 1, False) is BlockMode.REPLAY_STEP


def test_plan_resume_modes(recorded):
    d, _ = recorded
    plan = plan_replay(manifest(d, "full"), None, RESUME, pid=1, nparts=3)
    assert plan.per_epoch_modes == {2: BlockMode.REPLAY_STEP, 3: BlockMode.REPLAY_STEP}


def test_plan_errors(recorded, run_dir):
    d, _ = recorded
    m = manifest(d, "full")
    with pytest.raises(ReplayPlanError):
        plan_replay(m, mode="rewind")
    with pytest.raises(ReplayPlanError):
        plan_replay(m, pid=2, nparts=2)
    with pytest.raises(ReplayPlanError):
        plan_replay(m, hindsight=["no equals sign"])
    with pytest.raises(UnknownProbeError):
        plan_replay(m, "middle")
    with pytest.raises(MissingCheckpointError):
        plan_replay(manifest(d, "bare"), None, RESUME, pid=1, nparts=2)
    # pid 0 never needs a checkpoint
    plan_replay(manifest(d, "bare"), None, RESUME, pid=0, nparts=2)
    open_run(run_dir, "open").close()
    with pytest.raises(RunNotSealedError):
        replay_worker(run_dir, "open", write=False)


def test_hindsight_defaults_to_outer_probe(recorded):
    d, _ = recorded
    plan = plan_replay(manifest(d, "full"), hindsight=["w=norm(weights)"])
    assert plan.probe == "outer"


# -- execution ----------------------------------------------------------------


def test_serial_replay_reproduces_record(recorded):
    d, report = recorded
    result = replay_worker(d, "full", write=False)
    assert result.final_digest == report.final_digest
    record = read_log(d / "full" / "logs" / "record.log")
    assert deferred_diff(record, result.log).ok
    # with every entry stored the whole main block is skipped
    assert result.timing["skipped"] == SPEC.epochs


def test_replay_without_checkpoints_reexecutes(recorded):
    d, report = recorded
    result = replay_worker(d, "bare", write=False)
    assert result.final_digest == report.final_digest
    assert result.timing["skipped"] == 0
    assert deferred_diff(read_log(d / "bare" / "logs" / "record.log"), result.log).ok


@pytest.mark.parametrize("probe", ["outer", "inner"])
def test_hindsight_statements_add_records(recorded, probe):
    d, _ = recorded
    result = replay_worker(d, "full", probe=probe, hindsight=["wnorm=norm(weights)"], pid=1, nparts=2,
                           write=False)
    hs = [r for r in result.log.records if r.hindsight]
    epochs = {r.epoch for r in hs}
    assert epochs == {3, 4, 5}
    per_epoch = 1 if probe == "outer" else SPEC.steps_per_epoch
    assert len(hs) == 3 * per_epoch
    assert all(r.name == "wnorm" for r in hs)


def test_resume_and_pseudoresume_agree(recorded):
    d, _ = recorded
    a = replay_worker(d, "full", probe="inner", mode=RESUME, pid=1, nparts=2, hindsight=["l=loss"], write=False)
    b = replay_worker(d, "full", probe="inner", mode=PSEUDORESUME, pid=1, nparts=2, hindsight=["l=loss"],
                      write=False)
    assert a.final_digest == b.final_digest
    assert [r.to_line() for r in a.log.records] == [r.to_line() for r in b.log.records]


def test_early_stop_leaves_no_digest(recorded):
    d, _ = recorded
    result = replay_worker(d, "full", pid=0, nparts=3, write=False)
    assert result.final_digest is None and not result.timing["completed"]
    assert {r.epoch for r in result.log.records} == {0, 1}


def test_parallel_workers_merge_to_record(recorded):
    d, report = recorded
    results, wall = run_workers(d, "full", 3, probe="outer")
    assert wall > 0
    logs = read_worker_logs(worker_log_path(d, "full", pid) for pid in range(3))
    merged = merge_worker_logs(logs)
    assert deferred_diff(read_log(d / "full" / "logs" / "record.log"), merged).ok
    assert results[-1].final_digest == report.final_digest
    with pytest.raises(CoverageError):
        merge_worker_logs(logs[:2])


def test_scaling_file_accumulates(tmp_path):
    assert record_scaling(tmp_path, []) is None
    first = record_scaling(tmp_path, [(1.0, 2.0)])
    second = record_scaling(tmp_path, [(1.0, 4.0)])
    assert scaling_path(tmp_path).exists()
    assert first == pytest.approx(2.0) and second == pytest.approx(3.0)


def _append_scaling(args):
    directory, worker = args
    for i in range(25):
        record_scaling(directory, [(1.0, float(worker * 100 + i))])


def test_concurrent_scaling_updates_keep_every_observation(tmp_path):
    with multiprocessing.get_context("fork").Pool(4) as pool:
        pool.map(_append_scaling, [(tmp_path, w) for w in range(4)])
    observed = json.loads(scaling_path(tmp_path).read_text())["observed"]
    assert sorted(r for _, r in observed) == sorted(float(w * 100 + i) for w in range(4) for i in range(25))
