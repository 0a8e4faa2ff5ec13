"""Deterministic workloads and the record driver.

Two workload flavours share one interface:

* :class:`SyntheticWorkload` -- an epoch loop around a nested training loop
  over a linear model with momentum SGD.  Per-epoch compute is tuned with a
  calibrated busy-work kernel and checkpoint size with ``checkpoint_weight``.
* :class:`ScriptWorkload` -- a TrainScript program run hands-free: loops
  nested directly inside a top-level loop become SkipBlocks whose declared
  side-effects come from the changeset analyzer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import _accel, codec, kernels
from .errors import MissingCheckpointError, UnsealedRunError
from .execution import ExecutionContext, captured_json
from .logs import LogRecord, LogSink, WorkerLog, deferred_diff, write_log
from .materializer import DEFAULT_BATCH_THRESHOLD, DEFAULT_BOUND, BackgroundMaterializer
from .policy import PolicyParams
from .runtime import SideEffectSet, SkipBlockRuntime, serialize_seconds_per_byte
from .store import open_run
from .trainscript.analyzer import DEFAULT_ALLOWLIST, analyze_script
from .trainscript.builtins import PURE_FUNCTIONS
from .trainscript.interpreter import Interpreter, LoopHooks
from .trainscript.parser import parse_script

logger = logging.getLogger(__name__)


@dataclass
class WorkloadSpec:
    seed: int = 0
    epochs: int = 10
    steps_per_epoch: int = 10
    compute_cost: float = 0.1
    state_size: int = 1024
    checkpoint_weight: float = 1.0
    script: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be positive")
        if self.compute_cost < 0:
            raise ValueError("compute_cost must be nonnegative")
        if self.state_size < 1:
            raise ValueError("state_size must be positive")
        if self.checkpoint_weight < 1.0:
            raise ValueError("checkpoint_weight must be at least 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, body: dict) -> "WorkloadSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in body.items() if k in known})

    def fingerprint(self) -> str:
        raw = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.blake2b(raw, digest_size=8).hexdigest()


# -- synthetic workload -------------------------------------------------------

MOMENTUM = 0.9
BASE_LR = 0.01
LR_DECAY = 0.97
BURN_SIZE = 2048


class LinearModel:
    def __init__(self, weights: np.ndarray, frozen: np.ndarray):
        self.weights = weights
        self.frozen = frozen

    def state_dict(self) -> dict:
        return {"weights": self.weights, "frozen": self.frozen}

    def load_state_dict(self, state: dict) -> None:
        self.weights[...] = state["weights"]
        self.frozen[...] = state["frozen"]


class MomentumOptimizer:
    def __init__(self, size: int, lr: float):
        self.momentum = np.zeros(size)
        self.lr = lr
        self.steps = 0

    def state_dict(self) -> dict:
        return {"momentum": self.momentum, "lr": self.lr, "steps": self.steps}

    def load_state_dict(self, state: dict) -> None:
        self.momentum[...] = state["momentum"]
        self.lr = float(state["lr"])
        self.steps = int(state["steps"])


class DecaySchedule:
    """Per-epoch exponential learning-rate decay; lives outside the checkpoint."""

    def __init__(self, base_lr: float, gamma: float):
        self.base_lr = base_lr
        self.gamma = gamma
        self.epoch = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.gamma**self.epoch

    def step(self) -> None:
        self.epoch += 1


def _frozen_size(spec: WorkloadSpec) -> int:
    return int(round(spec.state_size * (spec.checkpoint_weight - 1.0)))


def _batch(seed: int, epoch: int, step: int, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, epoch, step])
    x = rng.standard_normal(target.size)
    y = x * target + 0.01 * rng.standard_normal(target.size)
    return x, y


def _digest_arrays(*items) -> str:
    h = hashlib.blake2b(digest_size=16)
    for item in items:
        if isinstance(item, np.ndarray):
            h.update(np.ascontiguousarray(item, dtype="<f8").tobytes())
        else:
            h.update(repr(item).encode())
    return h.hexdigest()


class SyntheticWorkload:
    kind = "synthetic"
    script_id = "synthetic"
    MAIN_LOOP = "synthetic:L0"
    BLOCK = "synthetic:L1"
    EFFECTS = ("model", "optimizer")

    def __init__(self, spec: WorkloadSpec, work_units: int = 0):
        self.spec = spec
        self.work_units = int(work_units)
        rng = np.random.default_rng([spec.seed, 1])
        self.target = rng.standard_normal(spec.state_size)
        self._burn_a = np.full(BURN_SIZE, 0.5)
        self._burn_b = np.full(BURN_SIZE, 0.25)

    # -- description ---------------------------------------------------------

    def loops(self) -> dict[str, dict]:
        return {
            self.MAIN_LOOP: {"ordinal": 0, "depth": 0, "block": None},
            self.BLOCK: {"ordinal": 1, "depth": 1, "block": self.BLOCK},
        }

    def blocks(self) -> dict[str, list[str] | None]:
        return {self.BLOCK: list(self.EFFECTS)}

    def probe_targets(self, main_loop: str) -> dict[str, str]:
        return {"outer": self.MAIN_LOOP, "inner": self.BLOCK}

    # -- execution -----------------------------------------------------------

    def init_state(self) -> dict[str, Any]:
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 0])
        model = LinearModel(rng.standard_normal(spec.state_size) * 0.1, rng.standard_normal(_frozen_size(spec)))
        optimizer = MomentumOptimizer(spec.state_size, BASE_LR)
        return {"model": model, "optimizer": optimizer, "scheduler": DecaySchedule(BASE_LR, LR_DECAY)}

    def train_step(self, ns: dict, epoch: int, step: int) -> float:
        model, opt = ns["model"], ns["optimizer"]
        x, y = _batch(self.spec.seed, epoch, step, self.target)
        residual = model.weights * x - y
        loss = float(np.dot(residual, residual) / residual.size)
        kernels.sgd_momentum_step(model.weights, opt.momentum, x, y, opt.lr, MOMENTUM)
        opt.steps += 1
        if self.work_units:
            kernels.burn(self._burn_a, self._burn_b, self.work_units)
        return loss

    def run(self, ctx: ExecutionContext) -> dict[str, Any]:
        spec = self.spec
        steps = spec.steps_per_epoch
        ns = self.init_state()
        effects = SideEffectSet(ns, self.EFFECTS)
        model, opt, sched = ns["model"], ns["optimizer"], ns["scheduler"]

        def resume(lo: int) -> int:
            # physical recovery needs the exact entry written at the end of lo-1
            starts = ctx.plan.epoch_starts.get(self.BLOCK) or list(range(spec.epochs))
            index = starts[lo] - 1
            if not ctx.runtime.store.has_checkpoint(self.BLOCK, index):
                raise MissingCheckpointError(f"resume at epoch {lo} needs {self.BLOCK}[{index}]")
            ctx.runtime.restore_side_effects(self.BLOCK, index, effects, replay_logs=False)
            ctx.runtime.set_execution_index(self.BLOCK, index + 1)
            sched.epoch = lo
            return lo

        loop_start = ctx.clock()
        for epoch in ctx.main_loop(spec.epochs, resume):
            opt.lr = sched.lr
            t0 = ctx.clock()
            for _ in ctx.runtime.skip_block(self.BLOCK, effects):
                for step in range(steps):
                    loss = self.train_step(ns, epoch, step)
                    ctx.log(epoch, step, "batch_loss", loss)
                    env = {"epoch": epoch, "step": step, "loss": loss, "lr": opt.lr,
                           "weights": model.weights, "momentum": opt.momentum}
                    for name, value in ctx.evaluate_hindsight(self.BLOCK, env):
                        ctx.log(epoch, step, name, value, hindsight=True)
            ctx.add_loop_time(self.BLOCK, ctx.clock() - t0)
            ctx.log(epoch, steps, "lr", opt.lr)
            ctx.log(epoch, steps, "weight_norm", float(np.linalg.norm(model.weights)))
            env = {"epoch": epoch, "lr": opt.lr, "weights": model.weights, "momentum": opt.momentum,
                   "steps": opt.steps}
            for name, value in ctx.evaluate_hindsight(self.MAIN_LOOP, env):
                ctx.log(epoch, steps, name, value, hindsight=True)
            sched.step()
        ctx.add_loop_time(self.MAIN_LOOP, ctx.clock() - loop_start)
        ctx.log(spec.epochs - 1, steps + 1, "final_weight_norm", float(np.linalg.norm(model.weights)))
        return ns

    def state_digest(self, ns: dict) -> str:
        model, opt, sched = ns["model"], ns["optimizer"], ns["scheduler"]
        return _digest_arrays(model.weights, model.frozen, opt.momentum, opt.lr, opt.steps, sched.epoch)


def step_overhead_seconds(spec: WorkloadSpec, repeats: int = 3) -> float:
    """Measured per-epoch cost of the synthetic workload without busy-work."""
    kernels.warm_up()
    wl = SyntheticWorkload(spec, 0)
    ns = wl.init_state()
    best = float("inf")
    for r in range(repeats):
        t0 = time.perf_counter()
        for step in range(spec.steps_per_epoch):
            wl.train_step(ns, r, step)
        best = min(best, time.perf_counter() - t0)
    return best


def calibrate_work_units(spec: WorkloadSpec) -> int:
    """Busy-work rounds per step so that one epoch costs ``compute_cost``."""
    remaining = spec.compute_cost - step_overhead_seconds(spec)
    if remaining <= 0:
        return 0
    return kernels.calibrate_work_units(BURN_SIZE, spec.steps_per_epoch, remaining)


_RATE_CACHE: dict[str, float] = {}


def checkpoint_seconds_per_byte() -> float:
    """End-to-end materialization cost per byte: capture plus the writer pipeline."""
    if "rate" not in _RATE_CACHE:
        probe = np.random.default_rng(0).standard_normal(1 << 20)
        best = float("inf")
        for _ in range(3):
            t0 = time.perf_counter()
            codec.capture(probe)
            best = min(best, time.perf_counter() - t0)
        _RATE_CACHE["rate"] = best / probe.nbytes + serialize_seconds_per_byte()
    return _RATE_CACHE["rate"]


def spec_for_ratio(ratio: float, *, compute_cost: float = 0.1, epochs: int = 30, steps_per_epoch: int = 10,
                   state_size: int = 1024, seed: int = 0) -> WorkloadSpec:
    """A synthetic spec whose checkpoint costs about ``ratio`` of one epoch."""
    target_bytes = ratio * compute_cost / checkpoint_seconds_per_byte()
    weight = max(1.0, target_bytes / (8.0 * state_size))
    return WorkloadSpec(seed=seed, epochs=epochs, steps_per_epoch=steps_per_epoch, compute_cost=compute_cost,
                        state_size=state_size, checkpoint_weight=weight)


# -- hands-free TrainScript workload ------------------------------------------


class LogPositions:
    """Assigns ``(epoch, step)`` to script log records.

    Records before the main loop land in epoch 0, records after it in the
    last epoch.  Step counters restart at each main-loop iteration except
    the first, and hindsight records count separately so adding probes never
    shifts the positions of recorded lines.
    """

    def __init__(self, epochs: int):
        self.epochs = epochs
        self.epoch = 0
        self.counters = {False: 0, True: 0}

    def start_iteration(self, index: int) -> None:
        if index != self.epoch:
            self.epoch = index
            self.counters = {False: 0, True: 0}

    def exit_main(self) -> None:
        last = max(self.epochs - 1, 0)
        if last != self.epoch:
            self.epoch = last
            self.counters = {False: 0, True: 0}

    def next(self, hindsight: bool) -> tuple[int, int]:
        step = self.counters[hindsight]
        self.counters[hindsight] = step + 1
        return self.epoch, step


class _ScriptHooks(LoopHooks):
    def __init__(self, workload: "ScriptWorkload", ctx: ExecutionContext):
        self.wl = workload
        self.ctx = ctx
        self.events: list[tuple] = []
        plan = ctx.plan
        self.main_ordinal = None if plan is None else workload.loop_ordinal(plan.main_loop)
        self.positions = None if plan is None else LogPositions(plan.epochs)
        ctx.restored_log_handler = self._restored

    # logging ---------------------------------------------------------------

    def emit(self, name: str, value: Any, hindsight: bool) -> None:
        if self.positions is None:
            self.events.append(("log", name, value, hindsight))
            if not hindsight:
                self.ctx.runtime.capture_log(captured_json(name, value))
            return
        epoch, step = self.positions.next(hindsight)
        self.ctx.epoch = epoch
        self.ctx.sink.emit(LogRecord(epoch, step, name, value, hindsight))

    def on_log(self, interp, stmt, value) -> None:
        self.emit(stmt.name, value, False)

    def _restored(self, line: str) -> None:
        obj = json.loads(line)
        self.emit(obj["name"], obj["value"], False)

    # loops -----------------------------------------------------------------

    def run_loop(self, interp: Interpreter, loop, iterations: range) -> None:
        ctx = self.ctx
        loop_id = loop.loop_id(self.wl.script_id)
        t0 = ctx.clock()
        if loop.depth == 0:
            self._run_top_level(interp, loop, loop_id, iterations)
        elif loop_id in self.wl.block_effects:
            names = self.wl.block_effects[loop_id]
            effects = None if names is None else SideEffectSet(interp.env, names)
            ran = False
            for _ in ctx.runtime.skip_block(loop_id, effects):
                ran = True
                self._iterate(interp, loop, loop_id, iterations)
            if not ran and len(iterations):
                # the iterator is never memoized; leave it where execution would
                interp.env[loop.iterator] = iterations[-1]
        else:
            self._iterate(interp, loop, loop_id, iterations)
        ctx.add_loop_time(loop_id, ctx.clock() - t0)

    def _iterate(self, interp, loop, loop_id, iterations) -> None:
        for i in iterations:
            interp.run_iteration(loop, i)
            for name, value in self.ctx.evaluate_hindsight(loop_id, interp.env, self.wl.probe_functions):
                self.emit(name, value, True)

    def _run_top_level(self, interp, loop, loop_id, iterations) -> None:
        ctx = self.ctx
        if self.positions is None:
            for idx, i in enumerate(iterations):
                self.events.append(("iter", loop.ordinal, idx))
                interp.run_iteration(loop, i)
            self.events.append(("exit", loop.ordinal))
            return
        if loop.ordinal != self.main_ordinal:
            self._iterate(interp, loop, loop_id, iterations)
            return
        for idx in ctx.main_loop(len(iterations)):
            self.positions.start_iteration(idx)
            ctx.epoch = idx
            interp.run_iteration(loop, iterations[idx])
            for name, value in ctx.evaluate_hindsight(loop_id, interp.env, self.wl.probe_functions):
                self.emit(name, value, True)
        self.positions.exit_main()
        ctx.epoch = self.positions.epoch

    def finalize_record(self, main_ordinal: int, epochs: int) -> None:
        positions = LogPositions(epochs)
        for ev in self.events:
            if ev[0] == "iter" and ev[1] == main_ordinal:
                positions.start_iteration(ev[2])
            elif ev[0] == "exit" and ev[1] == main_ordinal:
                positions.exit_main()
            elif ev[0] == "log":
                _, name, value, hindsight = ev
                epoch, step = positions.next(hindsight)
                self.ctx.sink.emit(LogRecord(epoch, step, name, value, hindsight))


class ScriptWorkload:
    kind = "script"

    def __init__(self, spec: WorkloadSpec, script_id: str = "script", allowlist=DEFAULT_ALLOWLIST):
        if not spec.script:
            raise ValueError("a script workload needs TrainScript source")
        self.spec = spec
        self.script_id = script_id
        self.work_units = 0
        self.script = parse_script(spec.script)
        self.analysis = analyze_script(self.script, script_id, allowlist)
        self.block_effects: dict[str, list[str] | None] = {}
        for lc, loop in zip(self.analysis, self.script.loops):
            if loop.depth == 1:
                self.block_effects[lc.loop_id] = sorted(lc.final.members) if lc.final.known else None
        self.probe_functions = PURE_FUNCTIONS
        self._hooks: _ScriptHooks | None = None
        self.main_epochs: dict[str, int] = {}

    def loop_ordinal(self, loop_id: str) -> int:
        return int(loop_id.rsplit(":L", 1)[1])

    def loops(self) -> dict[str, dict]:
        out = {}
        for loop in self.script.loops:
            block = None
            node = loop
            while node is not None:
                if node.depth == 1:
                    block = node.loop_id(self.script_id)
                node = node.parent
            out[loop.loop_id(self.script_id)] = {"ordinal": loop.ordinal, "depth": loop.depth, "block": block}
        return out

    def blocks(self) -> dict[str, list[str] | None]:
        return dict(self.block_effects)

    def probe_targets(self, main_loop: str) -> dict[str, str]:
        targets = {"outer": main_loop}
        main = self.script.loops[self.loop_ordinal(main_loop)]
        for stmt in main.body:
            if getattr(stmt, "depth", None) == 1:
                targets["inner"] = stmt.loop_id(self.script_id)
                break
        return targets

    def run(self, ctx: ExecutionContext) -> dict[str, Any]:
        hooks = _ScriptHooks(self, ctx)
        self._hooks = hooks
        interp = Interpreter(self.script, {"seed": self.spec.seed}, hooks=hooks, trace=False)
        self._interp = interp
        interp.run()
        return interp.env

    def finish_record(self, ctx: ExecutionContext, main_loop: str) -> int:
        """Assign final log positions once the main loop is known."""
        ordinal = self.loop_ordinal(main_loop)
        epochs = sum(1 for ev in self._hooks.events if ev[0] == "iter" and ev[1] == ordinal)
        self._hooks.finalize_record(ordinal, epochs)
        return epochs

    def state_digest(self, ns: dict) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(ns):
            try:
                rec = codec.to_record(name, ns[name])
            except (codec.CodecError, TypeError):
                h.update(f"{name}:{type(ns[name]).__name__}".encode())
                continue
            h.update(codec.encode_values([rec]))
        return h.hexdigest()


def make_workload(spec: WorkloadSpec, work_units: int | None = None):
    if spec.script:
        return ScriptWorkload(spec)
    if work_units is None:
        work_units = calibrate_work_units(spec)
    return SyntheticWorkload(spec, work_units)


# -- record driver ------------------------------------------------------------


@dataclass
class RecordReport:
    run_id: str
    run_dir: str
    baseline_seconds: float | None
    record_seconds: float
    overhead: float | None
    main_loop: str
    epochs: int
    blocks: dict[str, dict]
    final_digest: str
    baseline_digest: str | None
    log_matches_baseline: bool | None
    materializer: dict = field(default_factory=dict)
    work_units: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        lines = [f"run {self.run_id}: {self.epochs} epochs, main loop {self.main_loop}"]
        if self.baseline_seconds is not None:
            lines.append(
                f"baseline {self.baseline_seconds:.3f}s  recorded {self.record_seconds:.3f}s  "
                f"overhead {100 * self.overhead:.2f}%"
            )
        else:
            lines.append(f"recorded {self.record_seconds:.3f}s")
        for block, st in sorted(self.blocks.items()):
            lines.append(f"  {block}: k={st['k']} n={st['n']}")
        return "\n".join(lines)


def _execute(workload, runtime: SkipBlockRuntime, sink: LogSink):
    ctx = ExecutionContext(runtime, sink)
    t0 = time.perf_counter()
    ns = workload.run(ctx)
    status = runtime.finish()
    elapsed = time.perf_counter() - t0
    return ctx, ns, elapsed, status


def _select_main(workload, ctx: ExecutionContext) -> str:
    from .replay import select_main_loop

    loops = workload.loops()
    # only top-level loops can drive epochs
    candidates = {lid: ctx.loop_timings.get(lid, 0.0) for lid, info in loops.items() if info["depth"] == 0}
    return select_main_loop(candidates, {lid: info["ordinal"] for lid, info in loops.items()})


def new_run_id(spec: WorkloadSpec) -> str:
    return time.strftime("%Y%m%d-%H%M%S") + "-" + spec.fingerprint()[:8]


def record_run(
    spec: WorkloadSpec,
    out_dir: str | os.PathLike,
    run_id: str | None = None,
    *,
    params: PolicyParams | None = None,
    policy: str = "adaptive",
    background: bool = True,
    bound: int = DEFAULT_BOUND,
    batch_threshold: int = DEFAULT_BATCH_THRESHOLD,
    baseline: bool = True,
    work_units: int | None = None,
    charge_background: bool | None = None,
) -> RecordReport:
    """Record ``spec`` into a new sealed run, optionally timing a baseline.

    The baseline is the same workload in the same process with the policy
    forced off and no materializer.
    """
    params = params or PolicyParams()
    workload = make_workload(spec, work_units)
    # one-time costs stay out of both timed runs
    kernels.warm_up()
    serialize_seconds_per_byte()
    run_id = run_id or new_run_id(spec)

    baseline_seconds = baseline_digest = baseline_log = None
    if baseline:
        runtime = SkipBlockRuntime("record", params=params, policy="never")
        sink = LogSink()
        bctx, bns, baseline_seconds, _ = _execute(workload, runtime, sink)
        baseline_digest = workload.state_digest(bns)
        if isinstance(workload, ScriptWorkload):
            workload.finish_record(bctx, _select_main(workload, bctx))
        baseline_log = sink.records

    handle = open_run(out_dir, run_id, params, mode="record", workload_fingerprint=spec.fingerprint())
    try:
        materializer = BackgroundMaterializer(
            handle, bound=bound, batch_threshold=batch_threshold, background=background
        )
        runtime = SkipBlockRuntime(
            "record",
            store=handle,
            params=params,
            materializer=materializer,
            policy=policy,
            charge_background=charge_background,
        )
        sink = LogSink()
        ctx, ns, record_seconds, status = _execute(workload, runtime, sink)
        if status is not None and status.failed:
            raise UnsealedRunError(
                f"{status.failed} checkpoint write(s) failed; run {run_id!r} left unsealed",
                status.errors,
            )
        main_loop = _select_main(workload, ctx)
        if isinstance(workload, ScriptWorkload):
            epochs = workload.finish_record(ctx, main_loop)
            epoch_starts: dict = {}
        else:
            epochs = spec.epochs
            epoch_starts = ctx.epoch_starts()
        final_digest = workload.state_digest(ns)
        log_path = write_log(
            handle.logs_dir / "record.log",
            sink.records,
            {"run_id": run_id, "pid": None, "nparts": None, "epoch_range": [0, epochs], "epochs": epochs,
             "mode": "record"},
        )
        blocks = {b: st.to_dict() for b, st in runtime.stats.items()}
        meta = {
            "workload": spec.to_json(),
            "workload_kind": workload.kind,
            "work_units": workload.work_units,
            "backend": _accel.backend_name(),
            "loops": workload.loops(),
            "blocks": workload.blocks(),
            "loop_timings": ctx.loop_timings,
            "main_loop": main_loop,
            "probe_targets": workload.probe_targets(main_loop),
            "epochs": epochs,
            "epoch_starts": epoch_starts,
            "stats": blocks,
            "final_digest": final_digest,
            "record_seconds": record_seconds,
            "baseline_seconds": baseline_seconds,
            "policy": policy,
            "background": background,
            "charge_background": runtime.charge_background,
        }
        if isinstance(workload, ScriptWorkload):
            meta["changesets"] = [lc.to_json() for lc in workload.analysis]
        handle.manifest.meta.update(meta)
        handle.seal()
    finally:
        handle.close()

    log_matches = None
    if baseline_log is not None:
        log_matches = deferred_diff(baseline_log, sink.records).ok
    overhead = None
    if baseline_seconds:
        overhead = (record_seconds - baseline_seconds) / baseline_seconds
    return RecordReport(
        run_id=run_id,
        run_dir=str(Path(out_dir) / run_id),
        baseline_seconds=baseline_seconds,
        record_seconds=record_seconds,
        overhead=overhead,
        main_loop=main_loop,
        epochs=epochs,
        blocks=blocks,
        final_digest=final_digest,
        baseline_digest=baseline_digest,
        log_matches_baseline=log_matches,
        materializer={
            "max_in_flight": materializer.max_in_flight,
            "dispatches": materializer.dispatches,
            "completed": status.completed if status else 0,
        },
        work_units=workload.work_units,
    )
