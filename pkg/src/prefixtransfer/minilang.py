"""Two toy imperative mini-languages sharing one semantics.

Programs are tiny straight-line scripts (assignment, arithmetic, bounded
loops, print) over an input variable ``n`` plus a small variable pool.
The same AST renders to either surface syntax:

    alpha:  set a = ( n + 2 ) ; loop 3 { set b = a ; } print b ;
    beta:   a := ( n plus 2 ) . rep 3 [ b := a . ] emit b .

``run_program`` is the reference interpreter; reading a variable that was
never assigned raises MiniLangError, which is exactly the defect planted
into "buggy" classification examples. ``describe`` yields the English
summary used as the summarization target; it depends only on the AST, so
alpha and beta renderings of one program share a description.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, DataError, MiniLangError

INPUT_VAR = "n"
VAR_POOL = ("a", "b", "c", "d")
OPS = ("+", "-", "*")
OP_WORDS = {"+": "plus", "-": "minus", "*": "times"}
WORD_OPS = {w: op for op, w in OP_WORDS.items()}
LANGUAGES = ("alpha", "beta")


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Bin]


@dataclass(frozen=True)
class Assign:
    var: str
    expr: Expr


@dataclass(frozen=True)
class Loop:
    count: int
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class Print:
    expr: Expr


Stmt = Union[Assign, Loop, Print]
Program = tuple[Stmt, ...]


# ---------------------------------------------------------------------------
# rendering


def _expr_tokens(expr: Expr, word_ops: bool) -> list[str]:
    if isinstance(expr, Const):
        return [str(expr.value)]
    if isinstance(expr, Var):
        return [expr.name]
    op = OP_WORDS[expr.op] if word_ops else expr.op
    return ["("] + _expr_tokens(expr.left, word_ops) + [op] \
        + _expr_tokens(expr.right, word_ops) + [")"]


def _stmt_tokens(stmt: Stmt, language: str) -> list[str]:
    alpha = language == "alpha"
    if isinstance(stmt, Assign):
        expr = _expr_tokens(stmt.expr, word_ops=not alpha)
        if alpha:
            return ["set", stmt.var, "="] + expr + [";"]
        return [stmt.var, ":="] + expr + ["."]
    if isinstance(stmt, Print):
        expr = _expr_tokens(stmt.expr, word_ops=not alpha)
        return (["print"] + expr + [";"]) if alpha else (["emit"] + expr + ["."])
    body = [tok for s in stmt.body for tok in _stmt_tokens(s, language)]
    if alpha:
        return ["loop", str(stmt.count), "{"] + body + ["}"]
    return ["rep", str(stmt.count), "["] + body + ["]"]


def render(program: Program, language: str) -> str:
    if language not in LANGUAGES:
        raise ConfigError(f"unknown mini-language {language!r}")
    return " ".join(tok for s in program for tok in _stmt_tokens(s, language))


# ---------------------------------------------------------------------------
# parsing (used by the translation-equivalence oracle)


class _Parser:
    def __init__(self, tokens: list[str], language: str):
        self.tokens = tokens
        self.pos = 0
        self.language = language

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise DataError(f"{self.language}: unexpected end of program")
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.take()
        if got != tok:
            raise DataError(
                f"{self.language}: expected {tok!r} at token {self.pos - 1}, got {got!r}"
            )

    def expr(self) -> Expr:
        tok = self.take()
        if tok == "(":
            left = self.expr()
            op_tok = self.take()
            op = op_tok if self.language == "alpha" else WORD_OPS.get(op_tok)
            if op not in OPS:
                raise DataError(f"{self.language}: unknown operator {op_tok!r}")
            right = self.expr()
            self.expect(")")
            return Bin(op, left, right)
        if tok.isdigit():
            return Const(int(tok))
        return Var(tok)

    def statements(self, stop: str | None) -> tuple[Stmt, ...]:
        out: list[Stmt] = []
        while True:
            tok = self.peek()
            if tok is None:
                if stop is None:
                    break
                raise DataError(f"{self.language}: missing {stop!r}")
            if tok == stop:
                self.take()
                break
            out.append(self.statement())
        return tuple(out)

    def statement(self) -> Stmt:
        if self.language == "alpha":
            tok = self.take()
            if tok == "set":
                var = self.take()
                self.expect("=")
                expr = self.expr()
                self.expect(";")
                return Assign(var, expr)
            if tok == "print":
                expr = self.expr()
                self.expect(";")
                return Print(expr)
            if tok == "loop":
                count = int(self.take())
                self.expect("{")
                return Loop(count, self.statements("}"))
            raise DataError(f"alpha: unknown statement starting with {tok!r}")
        tok = self.take()
        if tok == "emit":
            expr = self.expr()
            self.expect(".")
            return Print(expr)
        if tok == "rep":
            count = int(self.take())
            self.expect("[")
            return Loop(count, self.statements("]"))
        var = tok
        self.expect(":=")
        expr = self.expr()
        self.expect(".")
        return Assign(var, expr)


def parse(text: str, language: str) -> Program:
    if language not in LANGUAGES:
        raise ConfigError(f"unknown mini-language {language!r}")
    return _Parser(text.split(), language).statements(stop=None)


# ---------------------------------------------------------------------------
# interpreter and description


def run_program(program: Program, input_value: int) -> list[int]:
    """Execute a program with ``n`` bound to input_value; return printed values."""
    env: dict[str, int] = {INPUT_VAR: int(input_value)}
    printed: list[int] = []

    def evaluate(expr: Expr) -> int:
        if isinstance(expr, Const):
            return expr.value
        if isinstance(expr, Var):
            try:
                return env[expr.name]
            except KeyError:
                raise MiniLangError(
                    f"variable {expr.name!r} read before assignment"
                ) from None
        left, right = evaluate(expr.left), evaluate(expr.right)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right

    def execute(stmts) -> None:
        for stmt in stmts:
            if isinstance(stmt, Assign):
                env[stmt.var] = evaluate(stmt.expr)
            elif isinstance(stmt, Print):
                printed.append(evaluate(stmt.expr))
            else:
                for _ in range(stmt.count):
                    execute(stmt.body)

    execute(program)
    return printed


def _expr_words(expr: Expr) -> str:
    if isinstance(expr, Const):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    return f"{_expr_words(expr.left)} {OP_WORDS[expr.op]} {_expr_words(expr.right)}"


def _stmt_words(stmt: Stmt) -> str:
    if isinstance(stmt, Assign):
        return f"set {stmt.var} to {_expr_words(stmt.expr)}"
    if isinstance(stmt, Print):
        return f"print {_expr_words(stmt.expr)}"
    inner = " and ".join(_stmt_words(s) for s in stmt.body)
    return f"repeat {stmt.count} times do {inner}"


def describe(program: Program) -> str:
    """Language-agnostic English summary of a program."""
    return " then ".join(_stmt_words(s) for s in program)


# ---------------------------------------------------------------------------
# generation


def _gen_expr(rng: np.random.Generator, readable: tuple[str, ...], depth: int) -> Expr:
    roll = rng.random()
    if depth > 0 and roll < 0.35:
        op = OPS[int(rng.integers(len(OPS)))]
        return Bin(op, _gen_expr(rng, readable, depth - 1),
                   _gen_expr(rng, readable, depth - 1))
    if roll < 0.75:
        return Var(readable[int(rng.integers(len(readable)))])
    return Const(int(rng.integers(0, 10)))


def _gen_stmt(rng: np.random.Generator, assigned: frozenset[str],
              allow_loop: bool) -> tuple[Stmt, frozenset[str]]:
    readable = tuple(sorted(assigned)) + (INPUT_VAR,)
    roll = rng.random()
    if roll < 0.45:
        var = VAR_POOL[int(rng.integers(len(VAR_POOL)))]
        return Assign(var, _gen_expr(rng, readable, depth=2)), assigned | {var}
    if roll < 0.75 or not allow_loop:
        return Print(_gen_expr(rng, readable, depth=1)), assigned
    count = int(rng.integers(2, 5))
    body: list[Stmt] = []
    inner = assigned
    for _ in range(int(rng.integers(1, 3))):
        stmt, inner = _gen_stmt(rng, inner, allow_loop=False)
        body.append(stmt)
    return Loop(count, tuple(body)), inner


def generate_program(rng: np.random.Generator) -> Program:
    """Random clean program: every variable is assigned before it is read."""
    stmts: list[Stmt] = []
    assigned: frozenset[str] = frozenset()
    for _ in range(int(rng.integers(2, 5))):
        stmt, assigned = _gen_stmt(rng, assigned, allow_loop=True)
        stmts.append(stmt)
    if not any(_contains_print(s) for s in stmts):
        readable = tuple(sorted(assigned)) + (INPUT_VAR,)
        stmts.append(Print(Var(readable[int(rng.integers(len(readable)))])))
    return tuple(stmts)


def _contains_print(stmt: Stmt) -> bool:
    if isinstance(stmt, Print):
        return True
    if isinstance(stmt, Loop):
        return any(_contains_print(s) for s in stmt.body)
    return False


def _replace_leaf(rng: np.random.Generator, expr: Expr, var: str) -> Expr:
    if not isinstance(expr, Bin):
        return Var(var)
    if rng.random() < 0.5:
        return Bin(expr.op, _replace_leaf(rng, expr.left, var), expr.right)
    return Bin(expr.op, expr.left, _replace_leaf(rng, expr.right, var))


def plant_defect(rng: np.random.Generator, program: Program) -> Program | None:
    """Swap one expression leaf for a variable unassigned at that point.

    Returns None when every top-level statement already has the whole
    variable pool assigned in front of it (caller should regenerate).
    """
    spots: list[tuple[int, tuple[str, ...]]] = []
    assigned: set[str] = set()
    for i, stmt in enumerate(program):
        free = tuple(v for v in VAR_POOL if v not in assigned)
        if free and isinstance(stmt, (Assign, Print)):
            spots.append((i, free))
        if isinstance(stmt, Assign):
            assigned.add(stmt.var)
        elif isinstance(stmt, Loop):
            for s in stmt.body:
                if isinstance(s, Assign):
                    assigned.add(s.var)
    if not spots:
        return None
    index, free = spots[int(rng.integers(len(spots)))]
    bad_var = free[int(rng.integers(len(free)))]
    target = program[index]
    broken_expr = _replace_leaf(rng, target.expr, bad_var)
    if isinstance(target, Assign):
        broken: Stmt = Assign(target.var, broken_expr)
    else:
        broken = Print(broken_expr)
    return program[:index] + (broken,) + program[index + 1:]


def is_defective(program: Program, inputs=(1, 2, 3)) -> bool:
    """True when the interpreter hits a use-before-assign on any fixed input."""
    for value in inputs:
        try:
            run_program(program, value)
        except MiniLangError:
            return True
    return False
