"""Rule language: parsing, pretty-printing and normal forms.

A rule file holds predicate declarations and quantified statements, one
per line::

    # relatedness guides alignment
    pred K(2) data "relate.tsv" keys(p, q)
    pred A(2) neuron "att[{0},{1}]"
    pred Ac(2) neuron "att'[{0},{1}]"
    forall i in Cp, j in Cq: K(i,j) & A(i,j) -> Ac(i,j) @rho=2

``&`` is conjunction, ``|`` disjunction, ``!`` negation; ``->`` and ``<->``
separate antecedent and consequent. Annotations after the consequent:
``@rho=<float|hard>``, ``@stopgrad`` and ``@name=<ident>``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Union

from .errors import (
    ArityMismatch,
    DisjunctiveConsequent,
    InvalidAuxiliary,
    NotContraposable,
    RuleSyntaxError,
    UnboundVariable,
    UnknownPredicate,
)

HARD = "hard"


# -- bindings ----------------------------------------------------------------


@dataclass(frozen=True)
class NeuronBound:
    pattern: str


@dataclass(frozen=True)
class DataBound:
    table: str
    keys: tuple[str, ...] = ()


@dataclass(frozen=True)
class Auxiliary:
    pass


@dataclass(frozen=True)
class Unaligned:
    """Built-in ``Z <-> exists j in outer: !(exists i in inner: source(i, j))``."""

    source: str
    inner: str
    outer: str


Binding = Union[NeuronBound, DataBound, Auxiliary, Unaligned]


@dataclass(frozen=True)
class Predicate:
    name: str
    arity: int
    binding: Binding


# -- terms and expressions ---------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str
    offset: int = 0

    def __str__(self) -> str:
        if self.offset > 0:
            return f"{self.name}+{self.offset}"
        if self.offset < 0:
            return f"{self.name}-{-self.offset}"
        return self.name


@dataclass(frozen=True)
class Const:
    value: Union[str, int]

    def __str__(self) -> str:
        return f'"{self.value}"' if isinstance(self.value, str) else str(self.value)


Term = Union[Var, Const]


@dataclass(frozen=True)
class Literal:
    predicate: Predicate
    args: tuple[Term, ...] = ()
    negated: bool = False

    @property
    def key(self) -> tuple:
        return (self.predicate.name, self.args)

    def negate(self) -> "Literal":
        return replace(self, negated=not self.negated)

    def __str__(self) -> str:
        body = self.predicate.name
        if self.args:
            body += "(" + ",".join(str(a) for a in self.args) + ")"
        return ("!" if self.negated else "") + body


@dataclass(frozen=True)
class Not:
    child: "Expr"


@dataclass(frozen=True)
class And:
    children: tuple["Expr", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Expr", ...]


Expr = Union[Literal, Not, And, Or]


@dataclass(frozen=True)
class RuleStatement:
    quantifiers: tuple[tuple[str, str], ...]
    antecedent: Expr
    consequent: Expr
    kind: str = "implication"  # or "biconditional"
    rho: Union[float, str] = 1.0
    stopgrad: bool = False
    name: str | None = None
    line: int | None = field(default=None, compare=False)

    @property
    def is_hard(self) -> bool:
        return self.rho == HARD


@dataclass(frozen=True)
class NormalizedAntecedent:
    form: str  # "conjunction" | "disjunction"
    literals: tuple[Literal, ...]
    aux_definitions: tuple[tuple[Predicate, "NormalizedAntecedent"], ...] = ()

    def evaluate(self, assignment: Mapping[tuple, bool]) -> bool:
        """Truth value with auxiliaries bound to their definitions."""
        env = dict(assignment)
        for pred, body in self.aux_definitions:
            env[(pred.name, _aux_args(pred))] = body._eval_flat(env)
        return self._eval_flat(env)

    def _eval_flat(self, env: Mapping[tuple, bool]) -> bool:
        vals = (env[lit.key] != lit.negated for lit in self.literals)
        return all(vals) if self.form == "conjunction" else any(vals)


@dataclass
class RuleProgram:
    predicates: dict[str, Predicate]
    statements: list[RuleStatement]
    source: str | None = None


# -- lexer -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#.*)
  | (?P<string>"[^"\n]*")
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<op><->|->|[(),:!&|+\-@=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(line_text: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(line_text):
        m = _TOKEN_RE.match(line_text, pos)
        if not m:
            raise RuleSyntaxError(lineno, pos + 1, "a token", line_text[pos])
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), lineno, pos + 1))
        pos = m.end()
    toks.append(_Tok("eol", "", lineno, len(line_text) + 1))
    return toks


class _LineParser:
    def __init__(self, toks: list[_Tok]):
        self.toks = toks
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected: str):
        t = self.cur
        raise RuleSyntaxError(t.line, t.col, expected, t.text or "end of line")

    def accept(self, text: str) -> bool:
        if self.cur.text == text and self.cur.kind != "string":
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> _Tok:
        tok = self.cur
        if not self.accept(text):
            self.fail(repr(text))
        return tok

    def expect_kind(self, kind: str, what: str) -> _Tok:
        tok = self.cur
        if tok.kind != kind:
            self.fail(what)
        self.i += 1
        return tok

    def at_end(self) -> bool:
        return self.cur.kind == "eol"


# Literals are built against placeholder predicates during parsing and
# resolved against the declarations once the whole file has been read.
def _placeholder(name: str, arity: int) -> Predicate:
    return Predicate(name, -1 - arity, Auxiliary())


def _parse_decl(p: _LineParser) -> Predicate:
    name = p.expect_kind("ident", "predicate name").text
    p.expect("(")
    arity = int(p.expect_kind("number", "arity").text)
    p.expect(")")
    kind = p.expect_kind("ident", "binding kind (neuron, data, aux, unaligned)").text
    if kind == "neuron":
        binding: Binding = NeuronBound(p.expect_kind("string", "neuron pattern").text[1:-1])
    elif kind == "data":
        table = p.expect_kind("string", "table name").text[1:-1]
        keys: list[str] = []
        if p.accept("keys"):
            p.expect("(")
            keys.append(p.expect_kind("ident", "sequence name").text)
            while p.accept(","):
                keys.append(p.expect_kind("ident", "sequence name").text)
            p.expect(")")
            if len(keys) != arity:
                raise ArityMismatch(name, arity, len(keys))
        binding = DataBound(table, tuple(keys))
    elif kind == "aux":
        binding = Auxiliary()
    elif kind == "unaligned":
        p.expect("(")
        src = p.expect_kind("ident", "source predicate").text
        p.expect(",")
        inner = p.expect_kind("ident", "inner index set").text
        p.expect(",")
        outer = p.expect_kind("ident", "outer index set").text
        p.expect(")")
        if arity != 0:
            raise ArityMismatch(name, 0, arity)
        binding = Unaligned(src, inner, outer)
    else:
        raise RuleSyntaxError(p.toks[p.i - 1].line, p.toks[p.i - 1].col, "neuron, data, aux or unaligned", kind)
    if not p.at_end():
        p.fail("end of line")
    return Predicate(name, arity, binding)


def _parse_term(p: _LineParser) -> Term:
    tok = p.cur
    if tok.kind == "string":
        p.i += 1
        return Const(tok.text[1:-1])
    if tok.kind == "number":
        p.i += 1
        if "." in tok.text or "e" in tok.text.lower():
            p.i -= 1
            p.fail("integer constant")
        return Const(int(tok.text))
    if tok.kind == "ident":
        p.i += 1
        offset = 0
        if p.cur.text in ("+", "-"):
            sign = 1 if p.cur.text == "+" else -1
            p.i += 1
            offset = sign * int(p.expect_kind("number", "integer offset").text)
        return Var(tok.text, offset)
    p.fail("argument")


def _parse_literal(p: _LineParser, negated: bool = False) -> Literal:
    name = p.expect_kind("ident", "predicate").text
    args: list[Term] = []
    if p.accept("("):
        if not p.accept(")"):
            args.append(_parse_term(p))
            while p.accept(","):
                args.append(_parse_term(p))
            p.expect(")")
    return Literal(_placeholder(name, len(args)), tuple(args), negated)


def _parse_unary(p: _LineParser) -> Expr:
    if p.accept("!"):
        inner = _parse_unary(p)
        if isinstance(inner, Literal):
            return inner.negate()
        return Not(inner)
    if p.accept("("):
        e = _parse_or(p)
        p.expect(")")
        return e
    if p.cur.kind == "ident":
        return _parse_literal(p)
    p.fail("literal, '!' or '('")


def _parse_and(p: _LineParser) -> Expr:
    items = [_parse_unary(p)]
    while p.accept("&"):
        items.append(_parse_unary(p))
    return items[0] if len(items) == 1 else And(tuple(items))


def _parse_or(p: _LineParser) -> Expr:
    items = [_parse_and(p)]
    while p.accept("|"):
        items.append(_parse_and(p))
    return items[0] if len(items) == 1 else Or(tuple(items))


def _parse_statement(p: _LineParser, lineno: int) -> RuleStatement:
    quants: list[tuple[str, str]] = []
    if p.accept("forall"):
        while True:
            var = p.expect_kind("ident", "variable").text
            p.expect("in")
            iset = p.expect_kind("ident", "index set").text
            quants.append((var, iset))
            if not p.accept(","):
                break
        p.expect(":")
    ante = _parse_or(p)
    if p.accept("->"):
        kind = "implication"
    elif p.accept("<->"):
        kind = "biconditional"
    else:
        p.fail("'->' or '<->'")
    cons = _parse_or(p)
    rho: Union[float, str] = 1.0
    stopgrad = False
    name = None
    while p.accept("@"):
        key = p.expect_kind("ident", "annotation").text
        if key == "rho":
            p.expect("=")
            tok = p.cur
            if tok.text == HARD:
                rho = HARD
            elif tok.kind == "number":
                rho = float(tok.text)
            else:
                p.fail("rho value (float or 'hard')")
            p.i += 1
        elif key == "stopgrad":
            stopgrad = True
        elif key == "name":
            p.expect("=")
            name = p.expect_kind("ident", "statement name").text
        else:
            p.i -= 1
            p.fail("rho, stopgrad or name")
    if not p.at_end():
        p.fail("end of statement")
    return RuleStatement(tuple(quants), ante, cons, kind, rho, stopgrad, name, lineno)


# -- resolution --------------------------------------------------------------


def _map_literals(expr: Expr, fn) -> Expr:
    if isinstance(expr, Literal):
        return fn(expr)
    if isinstance(expr, Not):
        return Not(_map_literals(expr.child, fn))
    return type(expr)(tuple(_map_literals(c, fn) for c in expr.children))


def iter_literals(expr: Expr) -> Iterator[Literal]:
    if isinstance(expr, Literal):
        yield expr
    elif isinstance(expr, Not):
        yield from iter_literals(expr.child)
    else:
        for c in expr.children:
            yield from iter_literals(c)


def _resolve(stmt: RuleStatement, preds: Mapping[str, Predicate]) -> RuleStatement:
    bound = {v for v, _ in stmt.quantifiers}

    def fix(lit: Literal) -> Literal:
        pred = preds.get(lit.predicate.name)
        if pred is None:
            raise UnknownPredicate(lit.predicate.name)
        if pred.arity != len(lit.args):
            raise ArityMismatch(pred.name, pred.arity, len(lit.args))
        for a in lit.args:
            if isinstance(a, Var) and a.name not in bound:
                raise UnboundVariable(a.name)
        return replace(lit, predicate=pred)

    return replace(stmt, antecedent=_map_literals(stmt.antecedent, fix), consequent=_map_literals(stmt.consequent, fix))


def _check_program(preds: Mapping[str, Predicate], stmts: list[RuleStatement]) -> None:
    defined: dict[str, int] = {}
    for st in stmts:
        if st.kind == "biconditional":
            c = st.consequent
            if not isinstance(c, Literal) or not isinstance(c.predicate.binding, Auxiliary):
                raise InvalidAuxiliary(f"line {st.line}: a biconditional must define a single aux predicate")
            defined[c.predicate.name] = defined.get(c.predicate.name, 0) + 1
        else:
            decompose_consequent(st)
            for lit in _consequent_literals(st):
                b = lit.predicate.binding
                if not isinstance(b, NeuronBound):
                    raise InvalidAuxiliary(
                        f"line {st.line}: consequent {lit.predicate.name!r} must be bound to a neuron"
                    )
    for name, pred in preds.items():
        if isinstance(pred.binding, Auxiliary) and defined.get(name, 0) != 1:
            raise InvalidAuxiliary(
                f"aux predicate {name!r} must be defined by exactly one biconditional, found {defined.get(name, 0)}"
            )
        if isinstance(pred.binding, Unaligned):
            src = preds.get(pred.binding.source)
            if src is None:
                raise UnknownPredicate(pred.binding.source)
            if src.arity != 2:
                raise ArityMismatch(src.name, 2, src.arity)


def parse_rules(source: str) -> list[RuleStatement]:
    """Parse rule-DSL text and return its statements in source order."""
    return parse_program(source).statements


def parse_program(source: str, predicates: Mapping[str, Predicate] | None = None) -> RuleProgram:
    preds: dict[str, Predicate] = dict(predicates or {})
    raw: list[RuleStatement] = []
    for lineno, text in enumerate(source.splitlines(), start=1):
        toks = _tokenize(text, lineno)
        if toks[0].kind == "eol":
            continue
        p = _LineParser(toks)
        if p.accept("pred"):
            pred = _parse_decl(p)
            prev = preds.get(pred.name)
            if prev is not None and prev != pred:
                raise RuleSyntaxError(lineno, toks[1].col, f"a single declaration of {pred.name!r}")
            preds[pred.name] = pred
        else:
            raw.append(_parse_statement(p, lineno))
    stmts = [_resolve(st, preds) for st in raw]
    _check_program(preds, stmts)
    return RuleProgram(preds, stmts, source)


def merge_programs(programs: Iterable[RuleProgram]) -> RuleProgram:
    """Combine several rule files into one program; declarations must agree."""
    preds: dict[str, Predicate] = {}
    stmts: list[RuleStatement] = []
    for prog in programs:
        for name, pred in prog.predicates.items():
            if name in preds and preds[name] != pred:
                raise RuleSyntaxError(0, 0, f"consistent declarations of {name!r}")
            preds[name] = pred
        stmts.extend(prog.statements)
    _check_program(preds, stmts)
    return RuleProgram(preds, stmts)


# -- pretty printing ---------------------------------------------------------


def format_expr(expr: Expr, parent: str = "") -> str:
    if isinstance(expr, Literal):
        return str(expr)
    if isinstance(expr, Not):
        return "!(" + format_expr(expr.child) + ")"
    sym, kind = (" & ", "and") if isinstance(expr, And) else (" | ", "or")
    body = sym.join(format_expr(c, kind) for c in expr.children)
    return f"({body})" if parent else body


def format_statement(stmt: RuleStatement) -> str:
    out = ""
    if stmt.quantifiers:
        out = "forall " + ", ".join(f"{v} in {s}" for v, s in stmt.quantifiers) + ": "
    arrow = " -> " if stmt.kind == "implication" else " <-> "
    out += format_expr(stmt.antecedent) + arrow + format_expr(stmt.consequent)
    if stmt.rho == HARD:
        out += " @rho=hard"
    elif stmt.rho != 1.0:
        out += f" @rho={stmt.rho:g}"
    if stmt.stopgrad:
        out += " @stopgrad"
    if stmt.name:
        out += f" @name={stmt.name}"
    return out


def format_predicate(pred: Predicate) -> str:
    b = pred.binding
    head = f"pred {pred.name}({pred.arity})"
    if isinstance(b, NeuronBound):
        return f'{head} neuron "{b.pattern}"'
    if isinstance(b, DataBound):
        keys = f" keys({', '.join(b.keys)})" if b.keys else ""
        return f'{head} data "{b.table}"{keys}'
    if isinstance(b, Unaligned):
        return f"{head} unaligned({b.source}, {b.inner}, {b.outer})"
    return f"{head} aux"


def format_program(prog: RuleProgram) -> str:
    lines = [format_predicate(p) for p in prog.predicates.values()]
    lines += [format_statement(s) for s in prog.statements]
    return "\n".join(lines) + "\n"


# -- truth-table semantics ---------------------------------------------------


def evaluate(expr: Expr, assignment: Mapping[tuple, bool]) -> bool:
    if isinstance(expr, Literal):
        return assignment[expr.key] != expr.negated
    if isinstance(expr, Not):
        return not evaluate(expr.child, assignment)
    vals = (evaluate(c, assignment) for c in expr.children)
    return all(vals) if isinstance(expr, And) else any(vals)


def statement_holds(stmt: RuleStatement, assignment: Mapping[tuple, bool]) -> bool:
    a = evaluate(stmt.antecedent, assignment)
    c = evaluate(stmt.consequent, assignment)
    return (not a or c) if stmt.kind == "implication" else a == c


def atoms(expr: Expr) -> list[tuple]:
    seen: dict[tuple, None] = {}
    for lit in iter_literals(expr):
        seen.setdefault(lit.key)
    return list(seen)


def truth_assignments(keys: list[tuple]) -> Iterator[dict[tuple, bool]]:
    for bits in itertools.product((False, True), repeat=len(keys)):
        yield dict(zip(keys, bits))


# -- normal forms ------------------------------------------------------------


def to_nnf(expr: Expr, negate: bool = False) -> Expr:
    """Push negations down to literals (De Morgan) and flatten."""
    if isinstance(expr, Literal):
        return expr.negate() if negate else expr
    if isinstance(expr, Not):
        return to_nnf(expr.child, not negate)
    flip = isinstance(expr, And) == negate  # And under negation becomes Or
    cls = Or if flip else And
    kids: list[Expr] = []
    for c in expr.children:
        n = to_nnf(c, negate)
        if isinstance(n, cls):
            kids.extend(n.children)
        else:
            kids.append(n)
    return kids[0] if len(kids) == 1 else cls(tuple(kids))


def _free_vars(expr: Expr, order: list[str]) -> tuple[str, ...]:
    used = {a.name for lit in iter_literals(expr) for a in lit.args if isinstance(a, Var)}
    return tuple(v for v in order if v in used)


def _aux_args(pred: Predicate) -> tuple[Term, ...]:
    return tuple(Var(v) for v in pred.binding.variables) if isinstance(pred.binding, _AuxVars) else ()


@dataclass(frozen=True)
class _AuxVars(Auxiliary):
    """Binding of auxiliaries introduced during normalization."""

    variables: tuple[str, ...] = ()


def normalize_antecedent(stmt: RuleStatement, prefix: str = "_P") -> NormalizedAntecedent:
    """Flatten a statement's antecedent into one conjunction or disjunction.

    Nested sub-expressions are replaced by fresh auxiliary predicates whose
    own bodies are normalized recursively; definitions come out in
    dependency order.
    """
    order = [v for v, _ in stmt.quantifiers]
    counter = itertools.count()
    expr = stmt.antecedent
    if stmt.kind == "biconditional" and isinstance(stmt.consequent, Literal) and stmt.consequent.negated:
        expr = Not(expr)
    return _normalize(to_nnf(expr), order, prefix, counter)


def _normalize(expr: Expr, order: list[str], prefix: str, counter) -> NormalizedAntecedent:
    if isinstance(expr, Literal):
        return NormalizedAntecedent("conjunction", (expr,))
    form = "conjunction" if isinstance(expr, And) else "disjunction"
    lits: list[Literal] = []
    defs: list[tuple[Predicate, NormalizedAntecedent]] = []
    for child in expr.children:
        if isinstance(child, Literal):
            lits.append(child)
            continue
        body = _normalize(child, order, prefix, counter)
        defs.extend(body.aux_definitions)
        flat = NormalizedAntecedent(body.form, body.literals)
        variables = _free_vars(child, order)
        pred = Predicate(f"{prefix}{next(counter)}", len(variables), _AuxVars(variables))
        defs.append((pred, flat))
        lits.append(Literal(pred, tuple(Var(v) for v in variables)))
    return NormalizedAntecedent(form, tuple(lits), tuple(defs))


def _consequent_literals(stmt: RuleStatement) -> list[Literal]:
    c = to_nnf(stmt.consequent)
    if isinstance(c, Literal):
        return [c]
    if isinstance(c, And) and all(isinstance(ch, Literal) for ch in c.children):
        return list(c.children)
    raise DisjunctiveConsequent(format_expr(stmt.consequent))


def decompose_consequent(stmt: RuleStatement) -> list[RuleStatement]:
    """Split ``L -> R1 & R2 & ...`` into one statement per conjunct."""
    if stmt.kind != "implication":
        return [stmt]
    lits = _consequent_literals(stmt)
    if len(lits) == 1 and isinstance(stmt.consequent, Literal):
        return [stmt]
    return [replace(stmt, consequent=lit) for lit in lits]


def contrapositive(stmt: RuleStatement) -> RuleStatement:
    """Rewrite ``L -> R`` as ``!R -> !L`` with negations at literal level."""
    if stmt.kind != "implication":
        raise NotContraposable("only implications have a contrapositive")
    if not isinstance(stmt.consequent, Literal):
        raise NotContraposable("consequent must be a single literal")
    ante = to_nnf(stmt.antecedent)
    if isinstance(ante, Literal):
        new_cons: Expr = ante.negate()
    elif isinstance(ante, Or) and all(isinstance(c, Literal) for c in ante.children):
        new_cons = And(tuple(c.negate() for c in ante.children))
    else:
        raise NotContraposable(
            f"contrapositive of {format_expr(stmt.antecedent)!r} would need a disjunctive consequent"
        )
    return replace(stmt, antecedent=stmt.consequent.negate(), consequent=new_cons)
