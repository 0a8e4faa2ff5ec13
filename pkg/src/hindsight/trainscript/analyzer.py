"""Static changeset estimation for TrainScript loops.

Each statement of a loop body is matched against six patterns, most
specific first; at most one applies:

    0  v.. = u..           with some v already in the changeset  -> unknown
    1  v.. = obj.method()                                         -> {obj, v..}
    2  v.. = func()                                               -> {v..}
    3  v.. = u..                                                  -> {v..}
    4  obj.method()                                               -> {obj}
    5  func()                                                     -> unknown

Rule 5 spares functions in an allowlist of known effect-free calls (by
default only ``log``).  An unknown verdict anywhere in the body makes the
whole loop unknown.  Estimated changesets are then filtered of loop-local
names and closed over optimizer/scheduler links.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .nodes import (
    Assign,
    ForLoop,
    FuncCallAssign,
    FuncCallStmt,
    Log,
    MethodCallAssign,
    MethodCallStmt,
    Name,
    Script,
    Stmt,
    reads,
    walk_statements,
    writes,
)
from .parser import LOG_FUNCTION

ESTIMATED = "Estimated"
UNKNOWN = "Unknown"
DEFAULT_ALLOWLIST = frozenset({LOG_FUNCTION})

# a nested loop header binds its iterator exactly like a plain assignment
NESTED_ITERATOR_RULE = 3


@dataclass(frozen=True)
class Changeset:
    status: str
    members: frozenset[str] = frozenset()
    provenance: Mapping[str, str] = field(default_factory=dict)
    reason: str | None = None

    def __post_init__(self):
        if self.status not in (ESTIMATED, UNKNOWN):
            raise ValueError(f"bad changeset status {self.status!r}")
        if self.status == UNKNOWN and self.members:
            raise ValueError("an unknown changeset has no members")
        if self.status == ESTIMATED and set(self.provenance) != set(self.members):
            raise ValueError("every estimated member needs a provenance")

    @property
    def known(self) -> bool:
        return self.status == ESTIMATED

    @classmethod
    def unknown(cls, reason: str) -> "Changeset":
        return cls(UNKNOWN, frozenset(), {}, reason)

    @classmethod
    def estimated(cls, provenance: Mapping[str, str]) -> "Changeset":
        return cls(ESTIMATED, frozenset(provenance), dict(provenance))

    def to_json(self) -> dict:
        out = {"status": self.status, "members": sorted(self.members)}
        out["provenance"] = {k: self.provenance[k] for k in sorted(self.provenance)}
        if self.reason:
            out["reason"] = self.reason
        return out


@dataclass(frozen=True)
class LinkRule:
    """If ``source`` is in a changeset, ``target`` is too."""

    kind: str
    source: str
    target: str
    constructor: str


# constructor name -> link kind; the first positional argument is the target
OPTIMIZER_CONSTRUCTORS = frozenset({"SGD", "Adam", "Momentum"})
SCHEDULER_CONSTRUCTORS = frozenset({"StepLR", "ExponentialLR"})


# -- rule matching ------------------------------------------------------------


def candidate_rules(stmt: Stmt, changeset: Iterable[str], allowlist: frozenset[str] = DEFAULT_ALLOWLIST) -> list[int]:
    """Every rule whose pattern matches ``stmt``, in ascending order."""
    current = set(changeset)
    out = []
    if isinstance(stmt, Assign) and any(t in current for t in stmt.targets):
        out.append(0)
    if isinstance(stmt, MethodCallAssign):
        out.append(1)
    if isinstance(stmt, FuncCallAssign):
        out.append(2)
    if isinstance(stmt, Assign):
        out.append(3)
    if isinstance(stmt, MethodCallStmt):
        out.append(4)
    if isinstance(stmt, FuncCallStmt) and stmt.func not in allowlist:
        out.append(5)
    if isinstance(stmt, Log) and LOG_FUNCTION not in allowlist:
        out.append(5)
    return out


def apply_rule(stmt: Stmt, changeset: Iterable[str], allowlist: frozenset[str] = DEFAULT_ALLOWLIST):
    """Return ``(rule, delta)`` for the activated rule, ``(rule, None)`` for
    an unknown verdict, or ``None`` when no rule applies."""
    rules = candidate_rules(stmt, changeset, allowlist)
    if not rules:
        return None
    rule = rules[0]
    if rule in (0, 5):
        return rule, None
    if rule == 1:
        return rule, (stmt.receiver, *stmt.targets)
    if rule in (2, 3):
        return rule, tuple(stmt.targets)
    return rule, (stmt.receiver,)


def estimate_changeset(loop: ForLoop, allowlist: Iterable[str] = DEFAULT_ALLOWLIST) -> Changeset:
    """Accumulate the per-statement deltas over the whole loop body."""
    allowlist = frozenset(allowlist)
    provenance: dict[str, str] = {}
    for stmt in walk_statements(loop.body):
        if isinstance(stmt, ForLoop):
            provenance.setdefault(stmt.iterator, f"rule{NESTED_ITERATOR_RULE}")
            continue
        hit = apply_rule(stmt, provenance, allowlist)
        if hit is None:
            continue
        rule, delta = hit
        if delta is None:
            return Changeset.unknown(f"rule{rule} at {stmt.loc}")
        for name in delta:
            provenance.setdefault(name, f"rule{rule}")
    return Changeset.estimated(provenance)


# -- loop-scope filter --------------------------------------------------------


class _Positions:
    """Program-order index of every statement of a script."""

    def __init__(self, script: Script):
        self.order: list[Stmt] = list(walk_statements(script.body))
        self.index = {id(s): i for i, s in enumerate(self.order)}

    def span(self, loop: ForLoop) -> tuple[int, int]:
        start = self.index[id(loop)]
        last = start
        for s in walk_statements(loop.body):
            last = max(last, self.index[id(s)])
        return start, last


def filter_loop_scoped(changeset: Changeset, loop: ForLoop, script: Script) -> Changeset:
    """Drop names that live only inside ``loop``.

    A name is loop-scoped when its first binding in program order is inside
    the loop body and nothing after the loop reads it.  The iterator is
    always loop-scoped.
    """
    if not changeset.known:
        return changeset
    pos = _Positions(script)
    start, last = pos.span(loop)
    first_def: dict[str, int] = {}
    read_after: set[str] = set()
    for i, stmt in enumerate(pos.order):
        for name in writes(stmt):
            first_def.setdefault(name, i)
        if i > last:
            read_after.update(reads(stmt))
    kept = {}
    for name, rule in changeset.provenance.items():
        if name == loop.iterator:
            continue
        defined_inside = start < first_def.get(name, -1) <= last
        if defined_inside and name not in read_after:
            continue
        kept[name] = rule
    return Changeset.estimated(kept)


# -- link augmentation --------------------------------------------------------


def build_link_registry(script: Script) -> list[LinkRule]:
    """Edges from constructor-call sites such as ``opt = SGD(model, ...)``."""
    rules = []
    for stmt in walk_statements(script.body):
        if not isinstance(stmt, FuncCallAssign) or len(stmt.targets) != 1:
            continue
        if not stmt.args or not isinstance(stmt.args[0], Name):
            continue
        if stmt.func in OPTIMIZER_CONSTRUCTORS:
            kind = "optimizer-of"
        elif stmt.func in SCHEDULER_CONSTRUCTORS:
            kind = "scheduler-of"
        else:
            continue
        rules.append(LinkRule(kind, stmt.targets[0], stmt.args[0].id, stmt.func))
    _check_acyclic(rules)
    return rules


def _check_acyclic(rules: list[LinkRule]) -> None:
    graph: dict[str, set[str]] = {}
    for r in rules:
        graph.setdefault(r.source, set()).add(r.target)
    state: dict[str, int] = {}

    def visit(node: str) -> None:
        state[node] = 1
        for nxt in graph.get(node, ()):
            if state.get(nxt) == 1:
                raise ValueError(f"link registry has a cycle through {nxt!r}")
            if nxt not in state:
                visit(nxt)
        state[node] = 2

    for node in list(graph):
        if node not in state:
            visit(node)


def augment_with_links(changeset: Changeset, registry: Iterable[LinkRule]) -> Changeset:
    if not changeset.known:
        return changeset
    registry = list(registry)
    provenance = dict(changeset.provenance)
    frontier = list(provenance)
    while frontier:
        name = frontier.pop()
        for rule in registry:
            if rule.source == name and rule.target not in provenance:
                provenance[rule.target] = f"link:{rule.kind}"
                frontier.append(rule.target)
    return Changeset.estimated(provenance)


# -- whole-script analysis ----------------------------------------------------


@dataclass(frozen=True)
class LoopChangeset:
    loop_id: str
    ordinal: int
    depth: int
    line: int
    raw: Changeset
    final: Changeset

    def to_json(self) -> dict:
        return {
            "loop_id": self.loop_id,
            "ordinal": self.ordinal,
            "depth": self.depth,
            "line": self.line,
            "raw": self.raw.to_json(),
            "changeset": self.final.to_json(),
        }


def analyze_script(script: Script, script_id: str = "script", allowlist: Iterable[str] = DEFAULT_ALLOWLIST) -> list[LoopChangeset]:
    """Estimated, filtered and augmented changesets for every loop."""
    registry = build_link_registry(script)
    out = []
    for loop in script.loops:
        raw = estimate_changeset(loop, allowlist)
        final = augment_with_links(filter_loop_scoped(raw, loop, script), registry)
        out.append(LoopChangeset(loop.loop_id(script_id), loop.ordinal, loop.depth, loop.loc.line, raw, final))
    return out
