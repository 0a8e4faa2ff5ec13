"""Reference interpreter for TrainScript.

Besides running scripts for the hands-free workload, the interpreter is the
brute-force oracle for the changeset analyzer: for every loop it records
which names already bound when the loop was first entered were rebound or
mutated by any of its executions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from ..errors import ScriptRuntimeError, UnknownBuiltinError
from .builtins import ScriptObject, default_builtins
from .nodes import (
    Assign,
    BinOp,
    Call,
    Expr,
    ForLoop,
    FuncCallAssign,
    FuncCallStmt,
    Log,
    MethodCall,
    MethodCallAssign,
    MethodCallStmt,
    Name,
    Num,
    Script,
    Stmt,
    Str,
    UnaryOp,
)


def _version(value: Any) -> int:
    return value.version if isinstance(value, ScriptObject) else 0


def evaluate(expr: Expr, env: Mapping[str, Any], builtins: Mapping[str, Callable], readonly: bool = False) -> Any:
    """Evaluate an expression against ``env``; calls resolve through ``builtins``.

    With ``readonly`` set, calling a mutating method is an error.
    """
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Str):
        return expr.value
    if isinstance(expr, Name):
        try:
            return env[expr.id]
        except KeyError:
            raise ScriptRuntimeError(f"name {expr.id!r} is not bound (at {expr.loc})") from None
    if isinstance(expr, UnaryOp):
        return -evaluate(expr.operand, env, builtins, readonly)
    if isinstance(expr, BinOp):
        left = evaluate(expr.left, env, builtins, readonly)
        right = evaluate(expr.right, env, builtins, readonly)
        try:
            if expr.op == "+":
                return left + right
            if expr.op == "-":
                return left - right
            if expr.op == "*":
                return left * right
            return left / right
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            raise ScriptRuntimeError(f"{exc} (at {expr.loc})") from None
    if isinstance(expr, Call):
        return _call(expr.func, expr.args, expr.kwargs, env, builtins, expr.loc, readonly)
    if isinstance(expr, MethodCall):
        return _method(expr.receiver, expr.method, expr.args, expr.kwargs, env, builtins, expr.loc, readonly)
    raise ScriptRuntimeError(f"cannot evaluate {type(expr).__name__}")  # pragma: no cover


def _args(args, kwargs, env, builtins, readonly=False):
    return (
        tuple(evaluate(a, env, builtins, readonly) for a in args),
        {k: evaluate(v, env, builtins, readonly) for k, v in kwargs},
    )


def _call(func, args, kwargs, env, builtins, loc, readonly=False):
    fn = builtins.get(func)
    if fn is None:
        raise UnknownBuiltinError(f"unknown function {func!r} (at {loc})")
    a, kw = _args(args, kwargs, env, builtins, readonly)
    try:
        return fn(*a, **kw)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ScriptRuntimeError(f"{func}: {exc} (at {loc})") from None


def _method(receiver, method, args, kwargs, env, builtins, loc, readonly=False):
    if receiver not in env:
        raise ScriptRuntimeError(f"name {receiver!r} is not bound (at {loc})")
    obj = env[receiver]
    if not isinstance(obj, ScriptObject):
        raise ScriptRuntimeError(f"{receiver!r} has no methods (at {loc})")
    if readonly and method in obj.MUTATING:
        raise ScriptRuntimeError(f"{receiver}.{method} mutates state and cannot be used here (at {loc})")
    a, kw = _args(args, kwargs, env, builtins, readonly)
    try:
        return obj.call(method, a, kw)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ScriptRuntimeError(f"{receiver}.{method}: {exc} (at {loc})") from None


def loggable(value: Any) -> int | float | str:
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, str):
        return value
    if isinstance(value, np.ndarray) and value.size == 1:
        return float(value.reshape(()))
    raise ScriptRuntimeError(f"log values must be scalars or strings, got {type(value).__name__}")


class LoopHooks:
    """Default loop driver; the hands-free workload overrides ``run_loop``."""

    def run_loop(self, interp: "Interpreter", loop: ForLoop, iterations: range) -> None:
        for i in iterations:
            interp.run_iteration(loop, i)

    def on_log(self, interp: "Interpreter", stmt: Log, value: Any) -> None:
        interp.logs.append((stmt.name, value))


@dataclass
class Trace:
    """Per-loop write-sets observed during execution (keyed by loop ordinal)."""

    observed: dict[int, set[str]] = field(default_factory=dict)
    entries: dict[int, int] = field(default_factory=dict)
    # names bound when each loop was entered for the first time
    pre_loop: dict[int, frozenset[str]] = field(default_factory=dict)


class Interpreter:
    def __init__(
        self,
        script: Script,
        env: dict[str, Any] | None = None,
        builtins: Mapping[str, Callable] | None = None,
        hooks: LoopHooks | None = None,
        trace: bool = True,
    ):
        self.script = script
        self.env: dict[str, Any] = dict(env or {})
        self.builtins = dict(builtins) if builtins is not None else default_builtins()
        self.hooks = hooks or LoopHooks()
        self.trace = Trace() if trace else None
        self.logs: list[tuple[str, Any]] = []

    def run(self) -> dict[str, Any]:
        self.exec_block(self.script.body)
        return self.env

    def exec_block(self, body: list[Stmt]) -> None:
        for stmt in body:
            self.exec_stmt(stmt)

    def eval(self, expr: Expr) -> Any:
        return evaluate(expr, self.env, self.builtins)

    def _bind(self, targets: tuple[str, ...], value: Any, loc) -> None:
        if len(targets) == 1:
            self.env[targets[0]] = value
            return
        if not isinstance(value, tuple) or len(value) != len(targets):
            raise ScriptRuntimeError(f"cannot unpack into {len(targets)} names (at {loc})")
        for t, v in zip(targets, value):
            self.env[t] = v

    def exec_stmt(self, stmt: Stmt) -> None:
        if isinstance(stmt, Assign):
            values = tuple(self.eval(e) for e in stmt.sources)
            self._bind(stmt.targets, values[0] if len(values) == 1 else values, stmt.loc)
        elif isinstance(stmt, FuncCallAssign):
            value = _call(stmt.func, stmt.args, stmt.kwargs, self.env, self.builtins, stmt.loc)
            self._bind(stmt.targets, value, stmt.loc)
        elif isinstance(stmt, MethodCallAssign):
            value = _method(stmt.receiver, stmt.method, stmt.args, stmt.kwargs, self.env, self.builtins, stmt.loc)
            self._bind(stmt.targets, value, stmt.loc)
        elif isinstance(stmt, MethodCallStmt):
            _method(stmt.receiver, stmt.method, stmt.args, stmt.kwargs, self.env, self.builtins, stmt.loc)
        elif isinstance(stmt, FuncCallStmt):
            _call(stmt.func, stmt.args, stmt.kwargs, self.env, self.builtins, stmt.loc)
        elif isinstance(stmt, Log):
            self.hooks.on_log(self, stmt, loggable(self.eval(stmt.expr)))
        elif isinstance(stmt, ForLoop):
            self.exec_loop(stmt)
        else:  # pragma: no cover
            raise ScriptRuntimeError(f"unsupported statement {type(stmt).__name__}")

    def loop_range(self, loop: ForLoop) -> range:
        bounds = []
        for e in loop.range_args:
            v = self.eval(e)
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            if not isinstance(v, (int, np.integer)):
                raise ScriptRuntimeError(f"range bounds must be integers (at {loop.loc})")
            bounds.append(int(v))
        return range(*bounds)

    def exec_loop(self, loop: ForLoop) -> None:
        """Run a loop; when tracing, record which of the names bound before
        its first entry it rebinds or mutates."""
        iterations = self.loop_range(loop)
        before = None
        if self.trace is not None:
            before = {name: (value, _version(value)) for name, value in self.env.items()}
        self.hooks.run_loop(self, loop, iterations)
        if before is not None:
            changed = self.trace.observed.setdefault(loop.ordinal, set())
            self.trace.entries[loop.ordinal] = self.trace.entries.get(loop.ordinal, 0) + 1
            pre_loop = self.trace.pre_loop.setdefault(loop.ordinal, frozenset(before))
            for name, (value, version) in before.items():
                if name not in pre_loop:
                    continue
                now = self.env.get(name, value)
                if now is not value or _version(now) != version:
                    changed.add(name)

    def run_iteration(self, loop: ForLoop, i: int) -> None:
        self.env[loop.iterator] = i
        self.exec_block(loop.body)


def interpret_and_trace(script: Script, env: dict[str, Any] | None = None, builtins=None):
    """Run ``script`` and return ``(final bindings, {ordinal: write-set})``."""
    interp = Interpreter(script, env, builtins)
    final = interp.run()
    return final, {k: frozenset(v) for k, v in interp.trace.observed.items()}
