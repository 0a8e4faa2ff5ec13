"""Recursive-descent parser for TrainScript.

Tokenization is delegated to the standard library tokenizer, which already
produces INDENT/DEDENT tokens and source positions for Python-shaped text.

Grammar::

    program    := stmt*
    stmt       := for_stmt | simple NEWLINE
    for_stmt   := 'for' NAME 'in' 'range' '(' args ')' ':' NEWLINE INDENT stmt+ DEDENT
    simple     := NAME (',' NAME)* '=' expr (',' expr)*
                | call
    expr       := term (('+' | '-') term)*
    term       := factor (('*' | '/') factor)*
    factor     := '-' factor | atom
    atom       := NUMBER | STRING | '(' expr ')' | NAME | call
    call       := NAME '(' args ')' | NAME '.' NAME '(' args ')'
    args       := [arg (',' arg)*]
    arg        := expr | NAME '=' expr
"""

from __future__ import annotations

import ast as _pyast
import io
import keyword
import tokenize
from tokenize import TokenInfo

from ..errors import TrainScriptSyntaxError
from .nodes import (
    Assign,
    BinOp,
    Call,
    Expr,
    ForLoop,
    FuncCallAssign,
    FuncCallStmt,
    Loc,
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
    reads,
    walk_statements,
    writes,
)

LOG_FUNCTION = "log"
_RESERVED = {"for", "in", "range"}
_SKIP = {tokenize.COMMENT, tokenize.NL, tokenize.ENCODING}


def _tokens(text: str) -> list[TokenInfo]:
    if not text.endswith("\n"):
        text += "\n"
    out = []
    try:
        for tok in tokenize.generate_tokens(io.StringIO(text).readline):
            if tok.type in _SKIP:
                continue
            if tok.type == tokenize.ERRORTOKEN and not tok.string.isspace():
                raise TrainScriptSyntaxError(f"unexpected character {tok.string!r}", tok.start[0], tok.start[1] + 1)
            if tok.type == tokenize.ERRORTOKEN:
                continue
            out.append(tok)
    except IndentationError as exc:
        raise TrainScriptSyntaxError(exc.msg, exc.lineno or 0, (exc.offset or 0)) from None
    except tokenize.TokenError as exc:
        msg, (line, col) = exc.args
        raise TrainScriptSyntaxError(msg, line, col + 1) from None
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokens(text)
        self.pos = 0
        self.loops: list[ForLoop] = []
        self._loop_stack: list[ForLoop] = []

    # -- token helpers -------------------------------------------------------

    @property
    def tok(self) -> TokenInfo:
        return self.toks[self.pos]

    def _loc(self, tok: TokenInfo | None = None) -> Loc:
        tok = tok or self.tok
        return Loc(tok.start[0], tok.start[1] + 1)

    def _error(self, message: str, tok: TokenInfo | None = None):
        tok = tok or self.tok
        if tok.type in (tokenize.NEWLINE, tokenize.ENDMARKER):
            found = "end of line"
        else:
            found = repr(tok.string)
        raise TrainScriptSyntaxError(f"{message}, found {found}", tok.start[0], tok.start[1] + 1)

    def _is(self, string: str) -> bool:
        return self.tok.type == tokenize.OP and self.tok.string == string

    def _is_kw(self, word: str) -> bool:
        return self.tok.type == tokenize.NAME and self.tok.string == word

    def _expect_op(self, string: str) -> TokenInfo:
        if not self._is(string):
            self._error(f"expected {string!r}")
        return self._advance()

    def _expect_type(self, ttype: int, what: str) -> TokenInfo:
        if self.tok.type != ttype:
            self._error(f"expected {what}")
        return self._advance()

    def _name(self) -> TokenInfo:
        tok = self.tok
        if tok.type != tokenize.NAME or tok.string in _RESERVED or keyword.iskeyword(tok.string):
            self._error("expected an identifier")
        return self._advance()

    def _advance(self) -> TokenInfo:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def _peek(self, offset: int) -> TokenInfo:
        i = min(self.pos + offset, len(self.toks) - 1)
        return self.toks[i]

    # -- statements ----------------------------------------------------------

    def program(self) -> Script:
        body = []
        while self.tok.type != tokenize.ENDMARKER:
            if self.tok.type == tokenize.INDENT:
                self._error("unexpected indent")
            body.append(self.statement())
        return Script(body, self.loops, _free_names(body))

    def statement(self) -> Stmt:
        if self._is_kw("for"):
            return self.for_stmt()
        stmt = self.simple()
        self._expect_type(tokenize.NEWLINE, "end of statement")
        return stmt

    def for_stmt(self) -> ForLoop:
        loc = self._loc()
        self._advance()
        iterator = self._name().string
        if not self._is_kw("in"):
            self._error("expected 'in'")
        self._advance()
        if not self._is_kw("range"):
            self._error("loops must iterate over range(...)")
        self._advance()
        self._expect_op("(")
        args, kwargs = self.arguments()
        if kwargs or not 1 <= len(args) <= 3:
            self._error("range takes one to three positional arguments")
        self._expect_op(")")
        self._expect_op(":")
        self._expect_type(tokenize.NEWLINE, "newline after ':'")
        self._expect_type(tokenize.INDENT, "an indented loop body")
        loop = ForLoop(
            iterator,
            tuple(args),
            [],
            len(self.loops),
            loc,
            depth=len(self._loop_stack),
            parent=self._loop_stack[-1] if self._loop_stack else None,
        )
        self.loops.append(loop)
        self._loop_stack.append(loop)
        while self.tok.type != tokenize.DEDENT:
            if self.tok.type == tokenize.ENDMARKER:  # pragma: no cover - tokenizer always dedents
                break
            loop.body.append(self.statement())
        loop.end_line = self.toks[self.pos - 1].end[0]
        self._advance()
        self._loop_stack.pop()
        return loop

    def simple(self) -> Stmt:
        loc = self._loc()
        first = self.tok
        if first.type != tokenize.NAME:
            self._error("expected a statement")
        # assignment: NAME (',' NAME)* '='
        if self._peek(1).type == tokenize.OP and self._peek(1).string in (",", "="):
            targets = [self._name().string]
            while self._is(","):
                self._advance()
                targets.append(self._name().string)
            self._expect_op("=")
            sources = [self.expr()]
            while self._is(","):
                self._advance()
                sources.append(self.expr())
            if len(targets) != len(set(targets)):
                raise TrainScriptSyntaxError("duplicate assignment target", loc.line, loc.col)
            if len(sources) == 1 and isinstance(sources[0], Call):
                c = sources[0]
                if c.func == LOG_FUNCTION:
                    raise TrainScriptSyntaxError("log(...) has no value", c.loc.line, c.loc.col)
                return FuncCallAssign(tuple(targets), c.func, c.args, c.kwargs, loc)
            if len(sources) == 1 and isinstance(sources[0], MethodCall):
                m = sources[0]
                return MethodCallAssign(tuple(targets), m.receiver, m.method, m.args, m.kwargs, loc)
            if len(sources) > 1 and len(sources) != len(targets):
                raise TrainScriptSyntaxError(
                    f"cannot unpack {len(sources)} values into {len(targets)} names", loc.line, loc.col
                )
            return Assign(tuple(targets), tuple(sources), loc)

        expr = self.postfix()
        if isinstance(expr, Call):
            if expr.func == LOG_FUNCTION:
                return self._log(expr)
            return FuncCallStmt(expr.func, expr.args, expr.kwargs, loc)
        if isinstance(expr, MethodCall):
            return MethodCallStmt(expr.receiver, expr.method, expr.args, expr.kwargs, loc)
        self._error("expected an assignment or a call", first)
        raise AssertionError  # pragma: no cover

    def _log(self, call: Call) -> Log:
        if call.kwargs or len(call.args) != 2 or not isinstance(call.args[0], Str):
            raise TrainScriptSyntaxError('log takes ("name", value)', call.loc.line, call.loc.col)
        return Log(call.args[0].value, call.args[1], call.loc)

    # -- expressions ---------------------------------------------------------

    def expr(self) -> Expr:
        left = self.term()
        while self._is("+") or self._is("-"):
            op = self._advance()
            left = BinOp(op.string, left, self.term(), self._loc(op))
        return left

    def term(self) -> Expr:
        left = self.factor()
        while self._is("*") or self._is("/"):
            op = self._advance()
            left = BinOp(op.string, left, self.factor(), self._loc(op))
        return left

    def factor(self) -> Expr:
        if self._is("-"):
            op = self._advance()
            return UnaryOp("-", self.factor(), self._loc(op))
        return self.atom()

    def atom(self) -> Expr:
        tok = self.tok
        if tok.type == tokenize.NUMBER:
            self._advance()
            try:
                value = _pyast.literal_eval(tok.string)
            except (ValueError, SyntaxError):
                self._error("malformed number", tok)
            if not isinstance(value, (int, float)):
                self._error("only integer and real literals are supported", tok)
            return Num(value, self._loc(tok))
        if tok.type == tokenize.STRING:
            self._advance()
            try:
                value = _pyast.literal_eval(tok.string)
            except (ValueError, SyntaxError):
                self._error("malformed string", tok)
            if not isinstance(value, str):
                self._error("only text strings are supported", tok)
            return Str(value, self._loc(tok))
        if self._is("("):
            self._advance()
            inner = self.expr()
            self._expect_op(")")
            return inner
        if tok.type == tokenize.NAME:
            return self.postfix()
        self._error("expected an expression")
        raise AssertionError  # pragma: no cover

    def postfix(self) -> Expr:
        tok = self._name()
        loc = self._loc(tok)
        if self._is("."):
            self._advance()
            method = self._name().string
            if not self._is("("):
                self._error("attributes can only be called")
            self._advance()
            args, kwargs = self.arguments()
            self._expect_op(")")
            return MethodCall(tok.string, method, tuple(args), tuple(kwargs), loc)
        if self._is("("):
            self._advance()
            args, kwargs = self.arguments()
            self._expect_op(")")
            return Call(tok.string, tuple(args), tuple(kwargs), loc)
        return Name(tok.string, loc)

    def arguments(self) -> tuple[list[Expr], list[tuple[str, Expr]]]:
        args: list[Expr] = []
        kwargs: list[tuple[str, Expr]] = []
        if self._is(")"):
            return args, kwargs
        while True:
            if self.tok.type == tokenize.NAME and self._peek(1).type == tokenize.OP and self._peek(1).string == "=":
                key = self._name().string
                self._advance()
                if any(k == key for k, _ in kwargs):
                    self._error(f"repeated keyword {key!r}")
                kwargs.append((key, self.expr()))
            else:
                if kwargs:
                    self._error("positional argument after keyword argument")
                args.append(self.expr())
            if not self._is(","):
                return args, kwargs
            self._advance()


def _free_names(body: list[Stmt]) -> frozenset[str]:
    """Names read somewhere before any statement binds them."""
    bound: set[str] = set()
    free: set[str] = set()
    for stmt in walk_statements(body):
        for name in reads(stmt):
            if name not in bound:
                free.add(name)
        bound.update(writes(stmt))
    return frozenset(free)


def parse_script(text: str) -> Script:
    """Parse TrainScript source into a :class:`Script`."""
    return _Parser(text).program()


def parse_expression(text: str) -> Expr:
    """Parse a single expression (used for injected hindsight statements)."""
    p = _Parser(text)
    expr = p.expr()
    if p.tok.type == tokenize.NEWLINE:
        p._advance()
    if p.tok.type != tokenize.ENDMARKER:
        p._error("unexpected text after expression")
    return expr
