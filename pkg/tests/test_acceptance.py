"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line.  Timing
criteria that need several CPU cores are marked xfail on smaller machines
after printing their measured (failing) numbers.
"""

from __future__ import annotations

import math
import random
from fractions import Fraction

import numpy as np
import pytest

from hindsight import codec
from hindsight.errors import CorruptEntryError
from hindsight.execution import PSEUDORESUME, RESUME
from hindsight.logs import LogRecord, deferred_diff, read_log
from hindsight.policy import PolicyParams, joint_should_materialize, record_overhead_ok, replay_bound_ok
from hindsight.replay import merge_worker_logs, partition, read_worker_logs, replay_worker, run_workers, worker_log_path
from hindsight.store import FRAME_HEADER, open_run
from hindsight.trainscript import analyze_script, estimate_changeset, interpret_and_trace, parse_script
from hindsight.workload import WorkloadSpec, record_run, spec_for_ratio

from conftest import cores
from oracles import brute_force_partition, generate_cooperative_program, simulate_checkpoints

EPSILON = 0.0667
BLOCK = "synthetic:L1"


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


# -- 1 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("ratio", [0.001, 0.01, 0.1, 0.5, 1.0])
def test_criterion_1_overhead_bound(ratio, run_dir, verdict):
    spec = spec_for_ratio(ratio, compute_cost=0.1, epochs=30)
    # five interleaved baseline/record pairs; the fastest of each damps scheduler noise
    reports = [record_run(spec, run_dir, f"ratio-{ratio}-{i}", params=PolicyParams(epsilon=EPSILON))
               for i in range(5)]
    baseline = min(r.baseline_seconds for r in reports)
    recorded = min(r.record_seconds for r in reports)
    overhead = (recorded - baseline) / baseline
    wall = sum(r.baseline_seconds + r.record_seconds for r in reports)
    ks = [r.blocks[BLOCK]["k"] for r in reports]
    ok = overhead <= 0.10 and wall <= 120 and all(r.log_matches_baseline for r in reports)
    assert verdict(1, ok, f"M/C={ratio}: overhead {100 * overhead:.2f}% "
                          f"(single runs {', '.join(f'{100 * r.overhead:.1f}%' for r in reports)}) "
                          f"k={ks} n={spec.epochs} ({wall:.1f}s)")


# -- 2 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_adaptive_frequency(run_dir, verdict):
    train = WorkloadSpec(seed=2, epochs=50, steps_per_epoch=10, compute_cost=0.1, state_size=256)
    t = record_run(train, run_dir, "train", baseline=False).blocks[BLOCK]

    fine = spec_for_ratio(0.5, compute_cost=0.1, epochs=40, seed=2)
    f = record_run(fine, run_dir, "fine", params=PolicyParams(epsilon=EPSILON, c=1.0), baseline=False).blocks[BLOCK]
    # the oracle walks the rule with the block's measured average ratio
    measured = (f["sum_M"] / f["k"]) / f["mean_C"] if f["k"] else 0.5
    expected = sum(simulate_checkpoints(measured, f["n"], EPSILON, 1.0))
    ok = t["k"] == t["n"] and abs(f["k"] - expected) <= 1 and f["k"] < f["n"]
    assert verdict(2, ok, f"train k={t['k']}/n={t['n']}; fine-tune k={f['k']}/n={f['n']} "
                          f"(oracle {expected} at M/C={measured:.3f})")


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_policy_algebra(verdict):
    rng = random.Random(2024)
    mismatches = 0
    exact_mismatches = 0
    for _ in range(10_000):
        compute = rng.uniform(1e-4, 10.0)
        mat = compute * 10 ** rng.uniform(-4, 1)
        n = rng.randint(1, 500)
        k = rng.randint(0, n)
        c = 10 ** rng.uniform(-2, 1.5)
        eps = rng.uniform(0.0, 0.99)
        params = PolicyParams(epsilon=eps, c=c)
        joint = joint_should_materialize(mat, compute, n, k, params)
        both = record_overhead_ok(mat, compute, n, k + 1, eps) and replay_bound_ok(mat, compute, n, k + 1, c)
        mismatches += joint != both
        # rational arithmetic check, skipped only within rounding of the boundary
        lhs = Fraction(mat) / Fraction(compute)
        rhs = Fraction(n, k + 1) * min(1 / (1 + Fraction(c)), Fraction(eps))
        if abs(lhs - rhs) > Fraction(1, 10**9) * rhs:
            exact_mismatches += joint != (lhs < rhs)
    ok = mismatches == 0 and exact_mismatches == 0
    assert verdict(3, ok, f"{mismatches} conjunction and {exact_mismatches} exact mismatches in 10000 tuples")


# -- 4 ------------------------------------------------------------------------


def _perturbations(records):
    for i, r in enumerate(records):
        if isinstance(r.value, float):
            bumped = math.nextafter(r.value, math.inf) if math.isfinite(r.value) else 0.0
        elif isinstance(r.value, int):
            bumped = r.value + 1
        else:
            bumped = r.value + "x"
        yield records[:i] + [LogRecord(r.epoch, r.step, r.name, bumped)] + records[i + 1:]
        yield records[:i] + records[i + 1:]
    if records:
        last = records[-1]
        yield records + [LogRecord(last.epoch, last.step + 1, "injected", 0.0)]


def test_criterion_4_replay_fidelity(run_dir, verdict):
    rng = random.Random(44)
    false_pos = false_neg = total = 0
    for w in range(20):
        if w % 2:
            spec = WorkloadSpec(seed=w, epochs=rng.randint(2, 4), script=generate_cooperative_program(w) +
                                'log("done", model.norm())\n')
        else:
            spec = WorkloadSpec(seed=w, epochs=rng.randint(3, 8), steps_per_epoch=rng.randint(1, 5),
                                compute_cost=0.0, state_size=rng.choice([8, 64, 512]))
        policy = rng.choice(["adaptive", "always"])
        record_run(spec, run_dir, f"w{w}", policy=policy, work_units=0, baseline=False)
        record = read_log(run_dir / f"w{w}" / "logs" / "record.log").records
        replay = replay_worker(run_dir, f"w{w}", write=False).log.records
        if not deferred_diff(record, replay).ok:
            false_pos += 1
        for perturbed in _perturbations(replay):
            total += 1
            false_neg += deferred_diff(record, perturbed).ok
    ok = false_pos == 0 and false_neg == 0 and total > 0
    assert verdict(4, ok, f"20 workloads, {false_pos} false positives, {false_neg}/{total} perturbations missed")


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_partition(verdict):
    big = max(hi - lo for lo, hi in partition(200, 16))
    small = max(hi - lo for lo, hi in partition(6, 4))
    rng = random.Random(5)
    cases = [(e, p) for e in range(1, 41) for p in range(1, 65)]
    cases += [(rng.randint(1, 500), rng.randint(1, 64)) for _ in range(2000)]
    bad = sum(partition(e, p) != brute_force_partition(e, p) for e, p in cases)
    ok = big == 13 and small == 2 and bad == 0
    assert verdict(5, ok, f"max(200,16)={big} max(6,4)={small}; {bad}/{len(cases)} differ from brute force")


# -- 6 and 7 share one 60-epoch recording -------------------------------------


@pytest.fixture(scope="module")
def long_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("long")
    spec = WorkloadSpec(seed=6, epochs=60, steps_per_epoch=10, compute_cost=0.2, state_size=1024)
    report = record_run(spec, d, "long", baseline=False)
    return d, report


@pytest.mark.slow
def test_criterion_6_parallel_replay(long_run, verdict):
    d, report = long_run
    probe = ["l=loss"]
    serial = replay_worker(d, "long", probe="inner", hindsight=probe, write=False)
    results, parallel_wall = run_workers(d, "long", 4, probe="inner", hindsight=probe)
    merged = merge_worker_logs(read_worker_logs(worker_log_path(d, "long", p) for p in range(4)))
    fidelity = deferred_diff(read_log(d / "long" / "logs" / "record.log"), merged).ok
    ratio = parallel_wall / serial.timing["wall_seconds"]

    walls = {RESUME: [], PSEUDORESUME: []}
    digests = set()
    for _ in range(2):
        for mode in walls:
            r = replay_worker(d, "long", probe="inner", hindsight=probe, mode=mode, pid=3, nparts=4, write=False)
            walls[mode].append(r.timing["wall_seconds"])
            digests.add(r.final_digest)
    resume, pseudo = min(walls[RESUME]), min(walls[PSEUDORESUME])
    same = digests == {report.final_digest}
    modes_ok = same and pseudo <= 1.25 * resume
    ok = ratio <= 0.35 and modes_ok and fidelity
    detail = (f"nparts=4 wall {parallel_wall:.2f}s = {ratio:.2f}x serial {serial.timing['wall_seconds']:.2f}s "
              f"on {cores()} core(s); digests identical={same}; pseudoresume {pseudo:.2f}s = "
              f"{pseudo / resume:.2f}x resume {resume:.2f}s")
    verdict(6, ok, detail)
    assert modes_ok and fidelity, detail
    if ratio > 0.35:
        if cores() < 4:
            pytest.xfail(f"parallel speedup needs 4 cores, have {cores()}: {detail}")
        pytest.fail(detail)


@pytest.mark.slow
def test_criterion_7_outer_probe_replay(long_run, verdict):
    d, report = long_run
    result = replay_worker(d, "long", probe="outer", hindsight=["w=norm(weights)"], write=False)
    wall = result.timing["wall_seconds"]
    hindsight = len(result.log.hindsight())
    ok = wall <= 0.1 * report.record_seconds and hindsight == 60 and result.final_digest == report.final_digest
    assert verdict(7, ok, f"outer-probe replay {wall:.3f}s vs record {report.record_seconds:.2f}s "
                          f"({report.record_seconds / wall:.0f}x), {hindsight} hindsight records")


# -- 8 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_background_materializer(run_dir, verdict):
    spec = spec_for_ratio(1.0, compute_cost=0.1, epochs=12)
    sync = record_run(spec, run_dir, "sync", policy="always", background=False)
    bg = record_run(spec, run_dir, "bg", policy="always", background=True, work_units=sync.work_units)
    in_flight = bg.materializer["max_in_flight"]
    applicable = sync.overhead >= 0.5
    cut = sync.overhead / bg.overhead if bg.overhead > 0 else math.inf
    ok = applicable and cut >= 2.0 and in_flight <= 2
    detail = (f"sync overhead {100 * sync.overhead:.1f}%, background {100 * bg.overhead:.1f}% "
              f"({cut:.2f}x cut) on {cores()} core(s); max in_flight {in_flight}")
    verdict(8, ok, detail)
    assert applicable and in_flight <= 2, detail
    if cut < 2.0:
        if cores() < 2:
            pytest.xfail(f"background writes cannot overlap compute on one core: {detail}")
        pytest.fail(detail)


# -- 9 ------------------------------------------------------------------------

RULE_FIXTURES = [
    ("out = model.fwd(x)", {"model": "rule1", "out": "rule1"}),
    ("opt.step()", {"opt": "rule4"}),
    ("loss = crit(out, y)\na, b = u, v", {"loss": "rule2", "a": "rule3", "b": "rule3"}),
    ("a = crit(out, y)\na, b = u, v", None),
    ("mystery(x)", None),
    ('log("x", x)', {}),
]


def test_criterion_9_analyzer_soundness(verdict):
    fixtures_ok = 0
    for body, expected in RULE_FIXTURES:
        loop = parse_script("for i in range(2):\n" + "".join(f"    {l}\n" for l in body.splitlines())).loops[0]
        cs = estimate_changeset(loop)
        fixtures_ok += (not cs.known) if expected is None else (cs.known and dict(cs.provenance) == expected)
    blocks = violations = 0
    for seed in range(200):
        script = parse_script(generate_cooperative_program(seed))
        _, observed = interpret_and_trace(script)
        for lc in analyze_script(script):
            if not lc.final.known:
                continue
            blocks += 1
            violations += not observed.get(lc.ordinal, set()) <= lc.final.members
    ok = fixtures_ok == len(RULE_FIXTURES) and violations == 0 and blocks > 0
    assert verdict(9, ok, f"{fixtures_ok}/{len(RULE_FIXTURES)} rule fixtures; "
                          f"{violations} unsound of {blocks} estimated blocks in 200 programs")


# -- 10 -----------------------------------------------------------------------


def _random_value(rng: random.Random, depth: int = 0):
    kind = rng.randrange(6 if depth < 2 else 5)
    if kind == 0:
        return rng.randint(-(2**63), 2**63 - 1)
    if kind == 1:
        return rng.choice([math.nan, math.inf, -math.inf, -0.0, 5e-324, rng.uniform(-1e308, 1e308)])
    if kind == 2:
        return "".join(chr(rng.randint(32, 0x2FFF)) for _ in range(rng.randint(0, 12)))
    if kind == 3:
        return np.frombuffer(rng.randbytes(8 * rng.randint(0, 32)), dtype=np.float64).copy()
    if kind == 4:
        return rng.randbytes(rng.randint(0, 40))
    return {f"k{i}": _random_value(rng, depth + 1) for i in range(rng.randint(0, 4))}


def _same(a, b) -> bool:
    if isinstance(a, float):
        return isinstance(b, float) and np.float64(a).tobytes() == np.float64(b).tobytes()
    if isinstance(a, np.ndarray):
        return isinstance(b, np.ndarray) and a.tobytes() == b.tobytes() and a.dtype == b.dtype
    if isinstance(a, dict):
        return isinstance(b, dict) and list(a) == list(b) and all(_same(a[k], b[k]) for k in a)
    return type(a) is type(b) and a == b


def test_criterion_10_store_robustness(run_dir, verdict):
    rng = random.Random(10)
    lists = [[(f"v{j}", _random_value(rng)) for j in range(rng.randint(1, 6))] for _ in range(1000)]
    h = open_run(run_dir, "values")
    for i, values in enumerate(lists):
        h.put_checkpoint("b", i, [codec.to_record(n, v) for n, v in values])
    h.seal()
    h.close()
    exact = 0
    with open_run(run_dir, "values", mode="replay") as r:
        for i, values in enumerate(lists):
            back = [(rec.name, codec.from_record(rec)) for rec in r.get_checkpoint("b", i)]
            exact += len(back) == len(values) and all(
                n1 == n2 and _same(v1, v2) for (n1, v1), (n2, v2) in zip(values, back))

    # corruption fixtures: single bit flips at random payload offsets, truncation, deletion
    raised = attempts = 0
    for trial in range(40):
        name = f"c{trial}"
        h = open_run(run_dir, name)
        h.put_checkpoint("b", 0, [codec.to_record("x", np.arange(16.0)), codec.to_record("s", "abc")])
        h.seal()
        h.close()
        seg = next((run_dir / name / "segments").glob("*.seg"))
        raw = bytearray(seg.read_bytes())
        if trial == 38:
            seg.write_bytes(bytes(raw[: len(raw) // 2]))
        elif trial == 39:
            seg.unlink()
        else:
            pos = rng.randrange(FRAME_HEADER.size, len(raw))
            raw[pos] ^= 1 << rng.randrange(8)
            seg.write_bytes(bytes(raw))
        attempts += 1
        with open_run(run_dir, name, mode="replay") as r:
            try:
                r.get_checkpoint("b", 0)
            except CorruptEntryError:
                raised += 1
    ok = exact == 1000 and raised == attempts
    assert verdict(10, ok, f"{exact}/1000 value lists bit-exact; {raised}/{attempts} corruptions raised corrupt-entry")
