"""Grounding rules on a computation graph and rewriting it with constraints.

A rule ``Z -> Y`` becomes ``y' = g(s + rho * d(z))`` where ``s`` is the
pre-activation of the neuron bound to ``Y``; a negated ``Y`` subtracts.
Biconditionals ``Z <-> P`` become parameter-free nodes ``p = d(z)``.

Grounded constraints are compiled in bulk: every distance aimed at the same
neuron shares one gather / scatter-sum / clamp pipeline, so a batch of a few
thousand groundings costs a dozen graph nodes.
"""

from __future__ import annotations

import csv
import itertools
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import (
    CyclicRule,
    DuplicateName,
    GraphCycle,
    InvalidAuxiliary,
    NoPreActivation,
    ShapeMismatch,
    UnknownIndexSet,
    UnknownNeuronName,
    UnknownTable,
)
from .graph import ACTIVATIONS, LEAF_OPS, ComputationGraph, _kahn, check_cyclicity, split_name
from .rules import (
    HARD,
    Auxiliary,
    Const,
    DataBound,
    Literal,
    NeuronBound,
    NormalizedAntecedent,
    Predicate,
    RuleProgram,
    RuleStatement,
    Unaligned,
    Var,
    _AuxVars,
    decompose_consequent,
    normalize_antecedent,
)
from .softlogic import DISJ, NEG_DISJ, DistanceExpr, compile_distance

HARD_MARGIN = 10.0


# -- references ----------------------------------------------------------------


@dataclass(frozen=True)
class ElementRef:
    """Scalar position (flat index) inside a named tensor node."""

    node: str
    index: int


@dataclass(frozen=True)
class AuxRef:
    node: str
    index: int


@dataclass(frozen=True)
class ConstRef:
    value: float


Ref = Union[ElementRef, AuxRef, ConstRef]


@dataclass(frozen=True)
class GroundedConstraint:
    consequent: ElementRef
    distance: DistanceExpr
    rho: Union[float, str] = 1.0
    sign: int = 1
    stopgrad: bool = False
    source: RuleStatement | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.rho != HARD and not self.rho > 0:
            raise ValueError(f"rho must be positive or HARD, got {self.rho!r}")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")


@dataclass(frozen=True)
class AuxiliaryLayerSpec:
    output_name: str
    distances: tuple[DistanceExpr, ...]
    stopgrad: bool = False

    def __init__(self, output_name: str, distance, stopgrad: bool = False):
        dists = (distance,) if isinstance(distance, DistanceExpr) else tuple(distance)
        object.__setattr__(self, "output_name", output_name)
        object.__setattr__(self, "distances", dists)
        object.__setattr__(self, "stopgrad", stopgrad)


# -- predicate tables ----------------------------------------------------------


@dataclass
class ExternalPredicateTable:
    name: str
    arity: int
    entries: dict[tuple[str, ...], float] = field(default_factory=dict)
    default: float = 0.0

    def __post_init__(self):
        for k, v in list(self.entries.items()) + [((), self.default)]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"table {self.name!r}: degree {v} for {k} lies outside [0, 1]")

    def degree(self, key: Sequence) -> float:
        return self.entries.get(tuple(str(k) for k in key), self.default)

    @classmethod
    def load(cls, path, name: str | None = None) -> "ExternalPredicateTable":
        path = Path(path)
        default = 0.0
        entries: dict[tuple[str, ...], float] = {}
        arity = None
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if not row or not row[0].strip():
                    continue
                if row[0].startswith("#"):
                    parts = row[0].split()
                    if parts[0] == "#default":
                        default = float(parts[1] if len(parts) > 1 else row[1])
                    continue
                key, deg = tuple(row[:-1]), float(row[-1])
                if arity is None:
                    arity = len(key)
                elif len(key) != arity:
                    raise ValueError(f"{path}: mixed key widths {arity} and {len(key)}")
                entries[key] = deg
        return cls(name or path.name, arity or 0, entries, default)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"#default {self.default!r}\n")
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for key in sorted(self.entries):
                w.writerow([*key, repr(self.entries[key])])


@dataclass
class GroundingContext:
    """Per-example quantifier domains, tables and token sequences.

    ``batch_index`` selects the example's slot when named tensors carry a
    leading batch axis.
    """

    index_sets: dict[str, list[int]]
    tables: dict[str, ExternalPredicateTable] = field(default_factory=dict)
    sequences: dict[str, list[str]] = field(default_factory=dict)
    batch_index: int | None = None


# -- compiled programs ---------------------------------------------------------


@dataclass(frozen=True)
class CompiledRule:
    statement: RuleStatement
    ante: NormalizedAntecedent
    distance: DistanceExpr
    target: Literal
    index: int


@dataclass(frozen=True)
class AuxDef:
    name: str
    params: tuple[str, ...]
    body: Union[NormalizedAntecedent, Unaligned]
    distance: DistanceExpr | None
    stopgrad: bool = False
    statement: RuleStatement | None = None


@dataclass
class CompiledProgram:
    rules: list[CompiledRule]
    aux: dict[str, AuxDef]
    predicates: dict[str, Predicate]
    tables: dict[str, ExternalPredicateTable] = field(default_factory=dict)


def _register_aux_defs(ante: NormalizedAntecedent, aux: dict[str, AuxDef], stopgrad: bool, stmt) -> None:
    for pred, body in ante.aux_definitions:
        params = pred.binding.variables if isinstance(pred.binding, _AuxVars) else ()
        aux[pred.name] = AuxDef(pred.name, params, body, compile_distance(body), stopgrad, stmt)


def compile_program(program: RuleProgram, rho: float | None = None, tables_dir=None) -> CompiledProgram:
    """Decompose, normalize and compile every statement of a program.

    ``rho`` (a float or HARD) overrides the weight of every non-hard
    statement. Data tables
    named by file are loaded from ``tables_dir`` when it holds them.
    """
    rules: list[CompiledRule] = []
    aux: dict[str, AuxDef] = {}
    for si, stmt in enumerate(program.statements):
        if rho is not None and stmt.rho != HARD:
            stmt = replace(stmt, rho=HARD if rho == HARD else float(rho))
        if stmt.kind == "biconditional":
            cons = stmt.consequent
            params = []
            for a in cons.args:
                if not isinstance(a, Var) or a.offset or a.name in params:
                    raise InvalidAuxiliary(f"line {stmt.line}: aux arguments must be distinct plain variables")
                params.append(a.name)
            ante = normalize_antecedent(stmt, prefix=f"_s{si}_P")
            used = {t.name for lit in ante.literals for t in lit.args if isinstance(t, Var)}
            if not used <= set(params):
                raise InvalidAuxiliary(f"line {stmt.line}: variables {sorted(used - set(params))} do not appear in the aux")
            _register_aux_defs(ante, aux, stmt.stopgrad, stmt)
            body = NormalizedAntecedent(ante.form, ante.literals)
            aux[cons.predicate.name] = AuxDef(
                cons.predicate.name, tuple(params), body, compile_distance(body), stmt.stopgrad, stmt
            )
            continue
        for k, part in enumerate(decompose_consequent(stmt)):
            ante = normalize_antecedent(part, prefix=f"_s{si}_{k}_P")
            _register_aux_defs(ante, aux, part.stopgrad, part)
            rules.append(CompiledRule(part, ante, compile_distance(ante), part.consequent, si))
    for pred in program.predicates.values():
        if isinstance(pred.binding, Unaligned):
            aux[pred.name] = AuxDef(pred.name, (), pred.binding, None)
    tables: dict[str, ExternalPredicateTable] = {}
    if tables_dir is not None:
        for pred in program.predicates.values():
            b = pred.binding
            if isinstance(b, DataBound) and (Path(tables_dir) / b.table).is_file():
                tables[b.table] = ExternalPredicateTable.load(Path(tables_dir) / b.table)
    return CompiledProgram(rules, aux, dict(program.predicates), tables)


# -- neuron patterns ------------------------------------------------------------

_PATTERN_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*'?)\s*(?:\[(.*)\])?\s*$")


@lru_cache(maxsize=None)
def parse_pattern(pattern: str) -> tuple[str, tuple[Union[int, tuple[str, int]], ...]]:
    """``"att'[{1},{0}]"`` -> ``("att'", (("slot", 1), ("slot", 0)))``."""
    m = _PATTERN_RE.match(pattern)
    if not m:
        raise ValueError(f"bad neuron pattern {pattern!r}")
    items: list = []
    if m.group(2) is not None and m.group(2).strip():
        for part in m.group(2).split(","):
            part = part.strip()
            slot = re.fullmatch(r"\{(\d+)\}", part)
            if slot:
                items.append(("slot", int(slot.group(1))))
            else:
                items.append(int(part))
    return m.group(1), tuple(items)


def _pattern_nodes(pred: Predicate, program: CompiledProgram, seen=None) -> set[str]:
    """Neuron names a predicate reads, looking through auxiliaries."""
    b = pred.binding
    if isinstance(b, NeuronBound):
        return {parse_pattern(b.pattern)[0]}
    if isinstance(b, Unaligned):
        return _pattern_nodes(program.predicates[b.source], program, seen)
    if isinstance(b, Auxiliary):
        seen = set() if seen is None else seen
        if pred.name in seen:
            return set()
        seen.add(pred.name)
        d = program.aux.get(pred.name)
        out: set[str] = set()
        if d is not None and isinstance(d.body, NormalizedAntecedent):
            for lit in d.body.literals:
                out |= _pattern_nodes(lit.predicate, program, seen)
        return out
    return set()


# -- grounding -----------------------------------------------------------------


@dataclass
class GroundingResult:
    constraints: list[GroundedConstraint]
    aux_specs: dict[str, AuxiliaryLayerSpec]
    counts: dict[int, int]


class Grounder:
    """Grounds a compiled program against one graph, example by example."""

    def __init__(self, program: CompiledProgram, g: ComputationGraph):
        self.program = program
        self.g = g
        self.aux_instances: dict[str, dict[tuple, int]] = {}
        self.aux_dists: dict[str, list[DistanceExpr]] = {}
        self._checked: set[int] = set()

    # references

    def _node_meta(self, name: str):
        base, _ = split_name(name)
        return self.g.node(self.g.lookup(base))

    def _value(self, term, env: Mapping[str, int], members: Mapping[str, set]):
        if isinstance(term, Const):
            return term.value
        v = env[term.name] + term.offset
        if term.offset and term.name in members and v not in members[term.name]:
            return None
        return v

    def _element(self, lit: Literal, env, members, ctx: GroundingContext) -> ElementRef | None:
        name, items = parse_pattern(lit.predicate.binding.pattern)
        node = self._node_meta(name)
        vals = []
        for t in lit.args:
            v = self._value(t, env, members)
            if v is None:
                return None
            vals.append(v)
        batched = len(node.shape) == len(items) + 1
        if not batched and len(node.shape) != len(items):
            raise ShapeMismatch(f"pattern {lit.predicate.binding.pattern!r} has {len(items)} coordinates, "
                                f"neuron {name!r} has rank {len(node.shape)}")
        coords = [ctx.batch_index or 0] if batched else []
        for item in items:
            axis = len(coords)
            v = vals[item[1]] if isinstance(item, tuple) else item
            if isinstance(v, str):
                labels = node.labels.get(axis)
                if labels is None or v not in labels:
                    raise ShapeMismatch(f"neuron {name!r} has no label {v!r} on axis {axis}")
                v = labels.index(v)
            coords.append(int(v))
        for c, d in zip(coords, node.shape):
            if not 0 <= c < d:
                raise ShapeMismatch(f"index {tuple(coords)} outside neuron {name!r} of shape {node.shape}")
        return ElementRef(name, int(np.ravel_multi_index(coords, node.shape)) if coords else 0)

    def _table(self, b: DataBound, ctx: GroundingContext) -> ExternalPredicateTable:
        t = ctx.tables.get(b.table) or self.program.tables.get(b.table)
        if t is None:
            raise UnknownTable(b.table)
        return t

    def _ref(self, lit: Literal, env, members, ctx: GroundingContext) -> Ref | None:
        b = lit.predicate.binding
        if isinstance(b, NeuronBound):
            return self._element(lit, env, members, ctx)
        if isinstance(b, DataBound):
            vals = [self._value(t, env, members) for t in lit.args]
            if any(v is None for v in vals):
                return None
            if b.keys:
                try:
                    key = [ctx.sequences[s][int(v)] for s, v in zip(b.keys, vals)]
                except (KeyError, IndexError):
                    return ConstRef(self._table(b, ctx).default)
            else:
                key = vals
            return ConstRef(float(self._table(b, ctx).degree(key)))
        vals = [self._value(t, env, members) for t in lit.args]
        if any(v is None for v in vals):
            return None
        return self._aux(lit.predicate.name, tuple(vals), ctx)

    def _aux(self, name: str, vals: tuple, ctx: GroundingContext) -> AuxRef | None:
        key = (ctx.batch_index, *vals)
        inst = self.aux_instances.setdefault(name, {})
        if key in inst:
            pos = inst[key]
            return None if pos < 0 else AuxRef(name, pos)
        d = self.program.aux[name]
        if isinstance(d.body, Unaligned):
            dist = self._unaligned(d, ctx)
        else:
            env = dict(zip(d.params, vals))
            members = {}
            refs = []
            for lit in d.body.literals:
                r = self._ref(lit, env, members, ctx)
                if r is None:
                    inst[key] = -1
                    return None
                refs.append(r)
            dist = d.distance.with_refs(refs)
        dists = self.aux_dists.setdefault(name, [])
        inst[key] = len(dists)
        dists.append(dist)
        return AuxRef(name, inst[key])

    def _unaligned(self, d: AuxDef, ctx: GroundingContext) -> DistanceExpr:
        b: Unaligned = d.body
        src = self.program.predicates[b.source]
        inner, outer = _index_set(ctx, b.inner), _index_set(ctx, b.outer)
        inner_name = f"{d.name}.inner"
        outer_refs: list[Ref] = []
        for j in outer:
            refs = [self._element(Literal(src, (Const(i), Const(j))), {}, {}, ctx) for i in inner]
            dist = DistanceExpr(NEG_DISJ, tuple((r, False) for r in refs) or ((ConstRef(0.0), False),))
            inst = self.aux_instances.setdefault(inner_name, {})
            dists = self.aux_dists.setdefault(inner_name, [])
            inst[(ctx.batch_index, j)] = len(dists)
            dists.append(dist)
            outer_refs.append(AuxRef(inner_name, len(dists) - 1))
        return DistanceExpr(DISJ, tuple((r, False) for r in outer_refs) or ((ConstRef(0.0), False),))

    # rules

    def check(self, rule: CompiledRule) -> None:
        if id(rule) in self._checked:
            return
        ante_names: set[str] = set()
        for lit in rule.ante.literals:
            ante_names |= _pattern_nodes(lit.predicate, self.program)
        target = parse_pattern(rule.target.predicate.binding.pattern)[0]
        base, _ = split_name(target)
        node = self.g.node(self.g.lookup(base))
        if node.op in LEAF_OPS:
            raise NoPreActivation(base)
        verdict = check_cyclicity(self.g, sorted(ante_names), [target])
        if verdict:
            raise CyclicRule(rule.statement, verdict.witness)
        self._checked.add(id(rule))

    def ground_rule(self, rule: CompiledRule, ctx: GroundingContext) -> list[GroundedConstraint]:
        self.check(rule)
        stmt = rule.statement
        names = [v for v, _ in stmt.quantifiers]
        domains = [_index_set(ctx, s) for _, s in stmt.quantifiers]
        members = {v: set(dom) for v, dom in zip(names, domains)}
        sign = -1 if rule.target.negated else 1
        out = []
        for combo in itertools.product(*domains):
            env = dict(zip(names, combo))
            refs = []
            for lit in rule.ante.literals:
                r = self._ref(lit, env, members, ctx)
                if r is None:
                    break
                refs.append(r)
            else:
                target = self._element(rule.target, env, members, ctx)
                if target is None:
                    continue
                out.append(GroundedConstraint(target, rule.distance.with_refs(refs), stmt.rho, sign,
                                              stmt.stopgrad, stmt))
        return out

    def ground_all(self, contexts: Iterable[GroundingContext]) -> GroundingResult:
        constraints: list[GroundedConstraint] = []
        counts: dict[int, int] = {}
        for ctx in contexts:
            for rule in self.program.rules:
                cs = self.ground_rule(rule, ctx)
                counts[rule.index] = counts.get(rule.index, 0) + len(cs)
                constraints.extend(cs)
        specs = {}
        for name, dists in self.aux_dists.items():
            if dists:
                d = self.program.aux.get(name)
                specs[name] = AuxiliaryLayerSpec(name, dists, bool(d and d.stopgrad))
        return GroundingResult(constraints, specs, counts)


def _index_set(ctx: GroundingContext, name: str) -> list[int]:
    try:
        return list(ctx.index_sets[name])
    except KeyError:
        raise UnknownIndexSet(name) from None


def ground(stmt: RuleStatement, ctx: GroundingContext, g: ComputationGraph,
           program: RuleProgram | None = None) -> list[GroundedConstraint]:
    """Ground one implication on one example."""
    preds = dict(program.predicates) if program else {}
    for lit in _literals_of(stmt):
        preds.setdefault(lit.predicate.name, lit.predicate)
    stmts = list(program.statements) if program else []
    if stmt not in stmts:
        stmts.append(stmt)
    compiled = compile_program(RuleProgram(preds, stmts))
    grounder = Grounder(compiled, g)
    out = []
    for rule in compiled.rules:
        if rule.statement == stmt or rule.statement.line == stmt.line and _same_origin(rule.statement, stmt):
            out.extend(grounder.ground_rule(rule, ctx))
    return out


def _same_origin(part: RuleStatement, stmt: RuleStatement) -> bool:
    return part.quantifiers == stmt.quantifiers and part.antecedent == stmt.antecedent and part.rho == stmt.rho


def _literals_of(stmt: RuleStatement):
    from .rules import iter_literals

    yield from iter_literals(stmt.antecedent)
    yield from iter_literals(stmt.consequent)


# -- graph rewriting -------------------------------------------------------------


class _Plan:
    """Augmented graph under construction, keyed independently of final ids.

    Keys are ``("old", id)`` for nodes copied from the source graph and
    ``("new", k)`` for added ones. Copied nodes that consumed a constrained
    neuron are redirected to its constrained version.
    """

    def __init__(self, g: ComputationGraph):
        self.g = g
        self.new: list[tuple] = []  # (op, input keys, attrs, name, labels, shape)
        self.redirect: dict[int, tuple] = {}
        self.names: dict[str, tuple] = {}

    def shape(self, key) -> tuple[int, ...]:
        return self.g.nodes[key[1]].shape if key[0] == "old" else self.new[key[1]][5]

    def add(self, op, inputs=(), name=None, labels=None, **attrs):
        from .graph import infer_shape

        shape = infer_shape(op, [self.shape(k) for k in inputs], attrs)
        self.new.append((op, tuple(inputs), attrs, name, labels or {}, shape))
        key = ("new", len(self.new) - 1)
        if name is not None:
            if name in self.g.name_index or name in self.names:
                raise DuplicateName(name)
            self.names[name] = key
        return key

    def const(self, value):
        return self.add("constant", value=np.asarray(value, dtype=float))

    def build(self) -> ComputationGraph:
        old_n = len(self.g.nodes)
        keys = [("old", i) for i in range(old_n)] + [("new", k) for k in range(len(self.new))]
        order_id = {k: (0 if k[0] == "old" else 1, k[1]) for k in keys}

        def inputs_of(key):
            if key[0] == "old":
                node = self.g.nodes[key[1]]
                return [self.redirect.get(i, ("old", i)) for i in node.inputs]
            return list(self.new[key[1]][1])

        ids = sorted(order_id.values())
        edges = {order_id[k]: [order_id[i] for i in inputs_of(k)] for k in keys}
        try:
            order = _kahn(ids, edges)
        except GraphCycle:
            raise GraphCycle("augmentation would close a cycle") from None
        out = ComputationGraph()
        final: dict[tuple, int] = {}
        for oid in order:
            key = ("old", oid[1]) if oid[0] == 0 else ("new", oid[1])
            ins = [final[("old", i[1]) if i[0] == 0 else ("new", i[1])] for i in edges[oid]]
            if key[0] == "old":
                n = self.g.nodes[key[1]]
                final[key] = out.add(n.op, ins, name=n.name, labels=n.labels, **n.attrs)
            else:
                op, _, attrs, name, labels, _ = self.new[key[1]]
                final[key] = out.add(op, ins, name=name, labels=labels, **attrs)
        return out


def _compile_distances(plan: _Plan, dists: Sequence[DistanceExpr], source_key, stopgrad: bool):
    """Vector of distance values, one entry per expression, in order."""
    lits = [(e, ref, neg) for e, d in enumerate(dists) for ref, neg in d.inputs]
    sources: dict[object, list[int]] = {}
    for pos, (_, ref, _) in enumerate(lits):
        src = ("const",) if isinstance(ref, ConstRef) else (type(ref).__name__, ref.node)
        sources.setdefault(src, []).append(pos)
    parts = []
    placed: list[int] = []
    for src, positions in sources.items():
        if src == ("const",):
            key = plan.const([lits[p][1].value for p in positions])
        else:
            key = plan.add("gather", [source_key(src[1])], indices=np.array([lits[p][1].index for p in positions]))
            if stopgrad:
                key = plan.add("stopgrad", [key])
        parts.append(key)
        placed.extend(positions)
    vec = parts[0] if len(parts) == 1 else plan.add("concat", parts, axis=0)
    if placed != sorted(placed):
        inv = np.empty(len(placed), dtype=np.int64)
        inv[np.array(placed)] = np.arange(len(placed))
        vec = plan.add("gather", [vec], indices=inv)
    neg = np.array([n for _, _, n in lits])
    if neg.any():
        vec = plan.add("affine", [vec], scale=np.where(neg, -1.0, 1.0), shift=np.where(neg, 1.0, 0.0))
    total = plan.add("scatter", [vec], shape=(len(dists),), indices=np.array([e for e, _, _ in lits]))
    scale, shift = zip(*(d.affine() for d in dists))
    u = plan.add("affine", [total], scale=np.array(scale), shift=np.array(shift))
    below = np.array([d.clamps_below for d in dists])
    if below.any():
        u = plan.add("clamp_min", [u], lo=np.where(below, 0.0, -np.inf))
    if (~below).any():
        u = plan.add("clamp_max", [u], hi=np.where(below, np.inf, 1.0))
    return u


def _split_stopgrad(items, key):
    groups: dict[bool, list] = {}
    for it in items:
        groups.setdefault(bool(key(it)), []).append(it)
    return groups


def rewrite(
    g: ComputationGraph,
    constraints: Sequence[GroundedConstraint] = (),
    aux_specs: Mapping[str, AuxiliaryLayerSpec] | Iterable[AuxiliaryLayerSpec] = (),
) -> ComputationGraph:
    """Return a new graph with auxiliary layers added and constraints applied."""
    if not isinstance(aux_specs, Mapping):
        aux_specs = {s.output_name: s for s in aux_specs}
    plan = _Plan(g)
    by_target: dict[str, list[GroundedConstraint]] = {}
    for c in constraints:
        base, _ = split_name(c.consequent.node)
        by_target.setdefault(base, []).append(c)
    for base in by_target:
        node = g.node(g.lookup(base))
        if node.op in LEAF_OPS:
            raise NoPreActivation(base)
        if base + "'" in g.name_index:
            raise DuplicateName(base + "'")
    built: dict[str, tuple] = {}

    # placeholders for constrained neurons so sources can refer to them first
    constrained: dict[str, tuple] = {}

    def source_key(name: str):
        if name in aux_specs:
            return aux_key(name)
        base, primed = split_name(name)
        if primed and base in by_target:
            return constrained[base]
        if base not in g.name_index:
            raise UnknownNeuronName(base)
        return ("old", g.name_index[base])

    def aux_key(name: str):
        if name not in built:
            spec = aux_specs[name]
            if name in g.name_index:
                raise DuplicateName(name)
            built[name] = None
            key = _compile_distances(plan, spec.distances, source_key, spec.stopgrad)
            # identity node carrying the auxiliary's name
            built[name] = plan.add("affine", [key], name=name)
        if built[name] is None:
            raise GraphCycle(f"auxiliary {name!r} depends on itself")
        return built[name]

    # Constrained neurons are laid out lazily; reserve their keys by building
    # in dependency order over targets.
    pending = list(by_target)
    deps: dict[str, set[str]] = {}
    for base, cs in by_target.items():
        needs: set[str] = set()
        for c in cs:
            for ref, _ in c.distance.inputs:
                if isinstance(ref, (ElementRef, AuxRef)):
                    needs |= _constrained_deps(ref.node, aux_specs, by_target)
        node = g.node(g.lookup(base))
        if node.op in ACTIVATIONS:
            pre = g.nodes[node.inputs[0]].name
            if pre in by_target:
                needs.add(pre)
        deps[base] = needs
    done: set[str] = set()
    while pending:
        ready = [b for b in pending if deps[b] <= done]
        if not ready:
            raise GraphCycle(f"constraints on {pending} depend on each other's constrained outputs")
        for base in ready:
            _apply_target(plan, g, base, by_target[base], source_key, constrained)
            done.add(base)
            pending.remove(base)
    for name in aux_specs:
        aux_key(name)
    return plan.build()


def _constrained_deps(name: str, aux_specs, by_target, seen=None) -> set[str]:
    seen = set() if seen is None else seen
    if name in seen:
        return set()
    seen.add(name)
    if name in aux_specs:
        out: set[str] = set()
        for d in aux_specs[name].distances:
            for ref, _ in d.inputs:
                if isinstance(ref, (ElementRef, AuxRef)):
                    out |= _constrained_deps(ref.node, aux_specs, by_target, seen)
        return out
    base, primed = split_name(name)
    return {base} if primed and base in by_target else set()


def _apply_target(plan: _Plan, g: ComputationGraph, base: str, cs: list[GroundedConstraint],
                  source_key, constrained: dict) -> None:
    rid = g.lookup(base)
    node = g.nodes[rid]
    if node.op in ACTIVATIONS:
        s_key = plan.redirect.get(node.inputs[0], ("old", node.inputs[0]))
    else:
        s_key = ("old", rid)
    s_shape = plan.shape(s_key)
    deltas = []
    for stop, group in sorted(_split_stopgrad(cs, lambda c: c.stopgrad).items()):
        d = _compile_distances(plan, [c.distance for c in group], source_key, stop)
        finite = np.array([0.0 if c.rho == HARD else c.sign * float(c.rho) for c in group])
        hard = np.array([float(c.sign) if c.rho == HARD else 0.0 for c in group])
        coef = plan.const(finite)
        if hard.any():
            spread = plan.add("affine", [plan.add("range", [s_key])], shift=HARD_MARGIN)
            coef = plan.add("add", [coef, plan.add("mul", [plan.const(hard), spread])])
        w = plan.add("mul", [d, coef])
        flat = np.array([c.consequent.index for c in group])
        deltas.append(plan.add("scatter", [w], shape=s_shape, indices=flat))
    s_new = s_key
    for delta in deltas:
        s_new = plan.add("add", [s_new, delta])
    if node.op in ACTIVATIONS:
        r_new = plan.add(node.op, [s_new], name=base + "'", labels=node.labels, **node.attrs)
    else:
        r_new = plan.add("affine", [s_new], name=base + "'", labels=node.labels)
    constrained[base] = r_new
    plan.redirect[rid] = r_new


def apply_constraints(g: ComputationGraph, cs: Sequence[GroundedConstraint]) -> ComputationGraph:
    """Add ``sign * rho * d`` to the pre-activation of every targeted element."""
    return rewrite(g, cs, {})


def apply_auxiliary(g: ComputationGraph, spec: AuxiliaryLayerSpec) -> tuple[ComputationGraph, int]:
    """Append a parameter-free node computing ``spec``'s distances directly."""
    if spec.output_name in g.name_index:
        raise DuplicateName(spec.output_name)
    out = rewrite(g, (), {spec.output_name: spec})
    return out, out.lookup(spec.output_name)


def augment_pipeline(
    rules: RuleProgram | CompiledProgram,
    g: ComputationGraph,
    ctx: GroundingContext | Sequence[GroundingContext],
    return_result: bool = False,
):
    """Normalize, compile, ground and rewrite in one pass."""
    program = rules if isinstance(rules, CompiledProgram) else compile_program(rules)
    contexts = [ctx] if isinstance(ctx, GroundingContext) else list(ctx)
    if not program.rules and not program.aux:
        return (g, GroundingResult([], {}, {})) if return_result else g
    result = Grounder(program, g).ground_all(contexts)
    out = rewrite(g, result.constraints, result.aux_specs)
    return (out, result) if return_result else out
