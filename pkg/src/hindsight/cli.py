"""Command-line driver: ``record``, ``replay``, ``analyze``, ``diff``, ``report``.

Exit status: 0 ok, 1 divergence, 2 usage or planning error, 3 I/O or
corrupted data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import (
    CoverageError,
    MalformedLogError,
    MaterializationError,
    MissingCheckpointError,
    OverlappingRangesError,
    ReplayPlanError,
    ScriptRuntimeError,
    StoreError,
    TrainScriptSyntaxError,
)
from .execution import MODES, PSEUDORESUME
from .logs import deferred_diff, read_log
from .policy import DEFAULT_C, DEFAULT_EPSILON, PolicyParams
from .materializer import DEFAULT_BATCH_THRESHOLD, DEFAULT_BOUND
from .runtime import POLICIES
from .store import open_run
from .trainscript.analyzer import DEFAULT_ALLOWLIST, analyze_script
from .trainscript.parser import parse_script

EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_USAGE = 2
EXIT_IO = 3

logger = logging.getLogger("hindsight")


class UsageError(Exception):
    pass


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"environment variable {name} must be an integer, got {raw!r}") from None


def _emit(args, text: str, body: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(body, indent=2, sort_keys=True))
    else:
        print(text)


# -- commands -----------------------------------------------------------------


def cmd_record(args) -> int:
    from .workload import WorkloadSpec, record_run

    script = None
    if args.script:
        script = Path(args.script).read_text()
    try:
        spec = WorkloadSpec(
            seed=args.seed,
            epochs=args.epochs,
            steps_per_epoch=args.steps,
            compute_cost=args.compute_cost,
            state_size=args.state_size,
            checkpoint_weight=args.checkpoint_weight,
            script=script,
        )
        params = PolicyParams(epsilon=args.epsilon, c=args.c)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = record_run(
        spec,
        args.dir,
        args.run_id,
        params=params,
        policy=args.policy,
        background=not args.sync,
        bound=args.bound,
        batch_threshold=args.batch_threshold,
        baseline=not args.no_baseline,
    )
    logger.info("recorded %s", report.run_id)
    _emit(args, report.summary(), report.to_json())
    return EXIT_OK


def _worker_ids(args) -> tuple[int, int]:
    pid = args.pid if args.pid is not None else _env_int("PID")
    nparts = args.nparts if args.nparts is not None else _env_int("NPARTS")
    return (0 if pid is None else pid), (1 if nparts is None else nparts)


def cmd_replay(args) -> int:
    from .replay import replay_worker

    pid, nparts = _worker_ids(args)
    result = replay_worker(
        args.dir,
        args.run_id,
        probe=args.probe,
        mode=args.mode,
        pid=pid,
        nparts=nparts,
        hindsight=args.hindsight or (),
    )
    t = result.timing
    lo, hi = result.plan.epoch_range
    lines = [
        f"worker {pid}/{nparts} epochs [{lo},{hi}) mode {result.plan.mode} probe {result.plan.probe}",
        f"wall {t['wall_seconds']:.3f}s  restore {t['restore_seconds']:.3f}s  "
        f"skipped {t['skipped']}  stepped {t['stepped']}",
        f"log {result.log_path} ({len(result.log.records)} records, {len(result.log.hindsight())} hindsight)",
    ]
    if t.get("speedup"):
        lines.append(f"speedup vs recorded compute {t['speedup']:.1f}x")
    status = EXIT_OK
    if result.final_digest is not None:
        with open_run(args.dir, args.run_id, mode="replay") as handle:
            expected = handle.manifest.meta.get("final_digest")
        if expected and expected != result.final_digest:
            lines.append(f"final state digest {result.final_digest} differs from recorded {expected}")
            status = EXIT_DIVERGENCE
    _emit(args, "\n".join(lines), result.to_json())
    return status


def cmd_analyze(args) -> int:
    path = Path(args.script)
    script = parse_script(path.read_text())
    allow = frozenset(DEFAULT_ALLOWLIST | set(args.allow or ()))
    result = analyze_script(script, path.stem, allow)
    if args.emit_changesets == "json":
        print(json.dumps([lc.to_json() for lc in result], indent=2))
        return EXIT_OK
    for lc in result:
        cs = lc.final
        indent = "  " * lc.depth
        if cs.known:
            members = ", ".join(f"{m} ({cs.provenance[m]})" for m in sorted(cs.members)) or "(empty)"
            print(f"{indent}{lc.loop_id} line {lc.line}: {members}")
        else:
            print(f"{indent}{lc.loop_id} line {lc.line}: UNKNOWN ({cs.reason})")
    return EXIT_OK


def cmd_diff(args) -> int:
    from .replay import merge_worker_logs

    record = read_log(args.record_log)
    replays = [read_log(p) for p in args.replay_logs]
    epochs = record.meta.get("epochs")
    if epochs is None and record.epoch_range is not None:
        epochs = record.epoch_range[1]
    merged = merge_worker_logs(replays, epochs)
    report = deferred_diff(record, merged)
    _emit(args, report.summary(), report.to_json())
    return EXIT_OK if report.ok else EXIT_DIVERGENCE


def cmd_report(args) -> int:
    with open_run(args.dir, args.run_id, mode="replay") as handle:
        manifest = handle.manifest
        problems = handle.verify() if args.verify else []
    meta = manifest.meta
    lines = [
        f"run {manifest.run_id} sealed={manifest.sealed} epsilon={manifest.epsilon} c={manifest.c_factor}",
        f"workload {meta.get('workload_kind')} epochs={meta.get('epochs')} main loop {meta.get('main_loop')} "
        f"backend {meta.get('backend')}",
    ]
    base, rec = meta.get("baseline_seconds"), meta.get("record_seconds")
    if base and rec:
        lines.append(f"baseline {base:.3f}s  recorded {rec:.3f}s  overhead {100 * (rec - base) / base:.2f}%")
    for block, st in sorted(meta.get("stats", {}).items()):
        lines.append(
            f"  {block}: k={st['k']} n={st['n']} mean C={st['mean_C']:.4f}s mean M={st['mean_M']:.4f}s"
        )
    for problem in problems:
        lines.append(f"  problem: {problem}")
    body = {"run_id": manifest.run_id, "sealed": manifest.sealed, "meta": meta, "problems": problems}
    _emit(args, "\n".join(lines), body)
    return EXIT_IO if problems else EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults; flags override it")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hindsight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parser.command_parsers = sub.choices

    p = sub.add_parser("record", help="run a workload and record checkpoints and logs")
    _common(p)
    p.add_argument("--dir", default="runs", help="directory holding runs")
    p.add_argument("--run-id")
    p.add_argument("--script", help="TrainScript (.tsc) program to record instead of the synthetic workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps", type=int, default=10, help="steps per epoch")
    p.add_argument("--compute-cost", type=float, default=0.1, help="target seconds per epoch")
    p.add_argument("--state-size", type=int, default=1024)
    p.add_argument("--checkpoint-weight", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--c", type=float, default=DEFAULT_C, help="restore/materialize scaling factor")
    p.add_argument("--policy", choices=POLICIES, default="adaptive")
    p.add_argument("--sync", action="store_true", help="write checkpoints on the main thread")
    p.add_argument("--bound", type=int, default=DEFAULT_BOUND, help="max in-flight writer batches")
    p.add_argument("--batch-threshold", type=int, default=DEFAULT_BATCH_THRESHOLD)
    p.add_argument("--no-baseline", action="store_true", help="skip the unrecorded timing run")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("replay", help="replay a recorded run, optionally with hindsight statements")
    _common(p)
    p.add_argument("run_id")
    p.add_argument("--dir", default="runs")
    p.add_argument("--pid", type=int, help="worker index (env PID)")
    p.add_argument("--nparts", type=int, help="worker count (env NPARTS)")
    p.add_argument("--mode", choices=MODES, default=PSEUDORESUME)
    p.add_argument("--probe", help="block or loop id, or 'outer' / 'inner'")
    p.add_argument("--hindsight", action="append", metavar="NAME=EXPR", help="statement to log; repeatable")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="print per-loop changesets of a TrainScript program")
    _common(p)
    p.add_argument("script")
    p.add_argument("--emit-changesets", choices=["json"])
    p.add_argument("--allow", action="append", metavar="FUNC", help="effect-free statement function")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("diff", help="compare a record log with merged replay logs")
    _common(p)
    p.add_argument("record_log")
    p.add_argument("replay_logs", nargs="+")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("report", help="summarize a recorded run")
    _common(p)
    p.add_argument("run_id")
    p.add_argument("--dir", default="runs")
    p.add_argument("--verify", action="store_true", help="check every stored entry's digest")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        body = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise UsageError("config must be a JSON object")
    subparser = parser.command_parsers[args.command]
    known = set(vars(args)) - {"func", "command", "config"}
    unknown = sorted(k.replace("-", "_") for k in body if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in body.items()})
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CoverageError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (
        UsageError,
        ReplayPlanError,
        MissingCheckpointError,
        OverlappingRangesError,
        TrainScriptSyntaxError,
        ScriptRuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MalformedLogError, StoreError, MaterializationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
