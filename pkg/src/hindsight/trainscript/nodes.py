"""AST node types for TrainScript."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union


@dataclass(frozen=True)
class Loc:
    line: int
    col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


# -- expressions --------------------------------------------------------------


@dataclass(frozen=True)
class Name:
    id: str
    loc: Loc


@dataclass(frozen=True)
class Num:
    value: int | float
    loc: Loc


@dataclass(frozen=True)
class Str:
    value: str
    loc: Loc


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    loc: Loc


@dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: "Expr"
    loc: Loc


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]
    kwargs: tuple[tuple[str, "Expr"], ...]
    loc: Loc


@dataclass(frozen=True)
class MethodCall:
    receiver: str
    method: str
    args: tuple["Expr", ...]
    kwargs: tuple[tuple[str, "Expr"], ...]
    loc: Loc


Expr = Union[Name, Num, Str, BinOp, UnaryOp, Call, MethodCall]


# -- statements ---------------------------------------------------------------


@dataclass(frozen=True)
class Assign:
    targets: tuple[str, ...]
    sources: tuple[Expr, ...]
    loc: Loc


@dataclass(frozen=True)
class FuncCallAssign:
    targets: tuple[str, ...]
    func: str
    args: tuple[Expr, ...]
    kwargs: tuple[tuple[str, Expr], ...]
    loc: Loc


@dataclass(frozen=True)
class MethodCallAssign:
    targets: tuple[str, ...]
    receiver: str
    method: str
    args: tuple[Expr, ...]
    kwargs: tuple[tuple[str, Expr], ...]
    loc: Loc


@dataclass(frozen=True)
class MethodCallStmt:
    receiver: str
    method: str
    args: tuple[Expr, ...]
    kwargs: tuple[tuple[str, Expr], ...]
    loc: Loc


@dataclass(frozen=True)
class FuncCallStmt:
    func: str
    args: tuple[Expr, ...]
    kwargs: tuple[tuple[str, Expr], ...]
    loc: Loc


@dataclass(frozen=True)
class Log:
    name: str
    expr: Expr
    loc: Loc


@dataclass(eq=False)
class ForLoop:
    iterator: str
    range_args: tuple[Expr, ...]
    body: list["Stmt"]
    ordinal: int
    loc: Loc
    end_line: int = 0
    depth: int = 0
    parent: "ForLoop | None" = field(default=None, repr=False)

    def loop_id(self, script_id: str) -> str:
        return f"{script_id}:L{self.ordinal}"


Stmt = Union[Assign, FuncCallAssign, MethodCallAssign, MethodCallStmt, FuncCallStmt, Log, ForLoop]


@dataclass(eq=False)
class Script:
    body: list[Stmt]
    loops: list[ForLoop]
    free_names: frozenset[str] = frozenset()

    def loop(self, ordinal: int) -> ForLoop:
        return self.loops[ordinal]


def walk_statements(body: list[Stmt]):
    """Yield every statement in program order, descending into loops."""
    for stmt in body:
        yield stmt
        if isinstance(stmt, ForLoop):
            yield from walk_statements(stmt.body)


def expr_names(expr: Expr):
    """Yield every variable name an expression reads."""
    if isinstance(expr, Name):
        yield expr.id
    elif isinstance(expr, BinOp):
        yield from expr_names(expr.left)
        yield from expr_names(expr.right)
    elif isinstance(expr, UnaryOp):
        yield from expr_names(expr.operand)
    elif isinstance(expr, Call):
        for a in expr.args:
            yield from expr_names(a)
        for _, a in expr.kwargs:
            yield from expr_names(a)
    elif isinstance(expr, MethodCall):
        yield expr.receiver
        for a in expr.args:
            yield from expr_names(a)
        for _, a in expr.kwargs:
            yield from expr_names(a)


def reads(stmt: Stmt) -> list[str]:
    """Names a statement reads (a loop header only, not its body)."""
    out: list[str] = []
    if isinstance(stmt, Assign):
        for e in stmt.sources:
            out.extend(expr_names(e))
    elif isinstance(stmt, (FuncCallAssign, FuncCallStmt)):
        for e in stmt.args:
            out.extend(expr_names(e))
        for _, e in stmt.kwargs:
            out.extend(expr_names(e))
    elif isinstance(stmt, (MethodCallAssign, MethodCallStmt)):
        out.append(stmt.receiver)
        for e in stmt.args:
            out.extend(expr_names(e))
        for _, e in stmt.kwargs:
            out.extend(expr_names(e))
    elif isinstance(stmt, Log):
        out.extend(expr_names(stmt.expr))
    elif isinstance(stmt, ForLoop):
        for e in stmt.range_args:
            out.extend(expr_names(e))
    return out


def writes(stmt: Stmt) -> tuple[str, ...]:
    """Names a statement binds (a loop header binds its iterator)."""
    if isinstance(stmt, (Assign, FuncCallAssign, MethodCallAssign)):
        return stmt.targets
    if isinstance(stmt, ForLoop):
        return (stmt.iterator,)
    return ()
