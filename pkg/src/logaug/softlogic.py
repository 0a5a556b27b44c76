"""Łukasiewicz distance functions for flat antecedents.

=========  ================================
form       distance
=========  ================================
Conj       max(0, sum(z) - n + 1)
Disj       min(1, sum(z))
NegDisj    max(0, 1 - sum(z))
NegConj    min(1, n - sum(z))
=========  ================================

Negated literals contribute ``1 - z``. Sums run left to right from zero so
that the graph compiler in :mod:`logaug.augment` reproduces these values
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Hashable, Sequence

from .errors import EmptyAntecedent, OutOfRange
from .rules import NormalizedAntecedent

CONJ, DISJ, NEG_DISJ, NEG_CONJ = "Conj", "Disj", "NegDisj", "NegConj"
FORMS = (CONJ, DISJ, NEG_DISJ, NEG_CONJ)
RANGE_TOL = 1e-6


@dataclass(frozen=True)
class DistanceExpr:
    form: str
    inputs: tuple[tuple[Hashable, bool], ...]

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown distance form {self.form!r}")
        if not self.inputs:
            raise EmptyAntecedent("a distance needs at least one literal")

    @property
    def arity(self) -> int:
        return len(self.inputs)

    @property
    def refs(self) -> tuple[Hashable, ...]:
        return tuple(r for r, _ in self.inputs)

    @property
    def negations(self) -> tuple[bool, ...]:
        return tuple(n for _, n in self.inputs)

    def with_refs(self, refs: Sequence[Any]) -> "DistanceExpr":
        if len(refs) != len(self.inputs):
            raise ValueError("reference count differs from arity")
        return DistanceExpr(self.form, tuple((r, n) for r, (_, n) in zip(refs, self.inputs)))

    def affine(self) -> tuple[float, float]:
        """(scale, shift) applied to the literal sum before clamping."""
        n = float(self.arity)
        return {CONJ: (1.0, -(n - 1.0)), DISJ: (1.0, 0.0), NEG_DISJ: (-1.0, 1.0), NEG_CONJ: (-1.0, n)}[self.form]

    @property
    def clamps_below(self) -> bool:
        return self.form in (CONJ, NEG_DISJ)


def compile_distance(ante: NormalizedAntecedent) -> DistanceExpr:
    """Distance expression over the antecedent's literals.

    References are the literal atoms ``(predicate, args)``; grounding later
    swaps them for graph element addresses.
    """
    if not ante.literals:
        raise EmptyAntecedent("empty antecedent")
    neg = [lit.negated for lit in ante.literals]
    keys = [lit.key for lit in ante.literals]
    if all(neg):
        form = NEG_DISJ if ante.form == "conjunction" else NEG_CONJ
        return DistanceExpr(form, tuple((k, False) for k in keys))
    form = CONJ if ante.form == "conjunction" else DISJ
    return DistanceExpr(form, tuple(zip(keys, neg)))


def eval_distance(d: DistanceExpr, z: Sequence[float]) -> float:
    if len(z) != d.arity:
        raise ValueError(f"expected {d.arity} values, got {len(z)}")
    total = 0.0
    for i, ((_, negated), v) in enumerate(zip(d.inputs, z)):
        v = float(v)
        if not -RANGE_TOL <= v <= 1.0 + RANGE_TOL:
            raise OutOfRange(i, v)
        total += (1.0 - v) if negated else v
    n = float(d.arity)
    if d.form == CONJ:
        return max(0.0, total - (n - 1.0))
    if d.form == DISJ:
        return min(1.0, total)
    if d.form == NEG_DISJ:
        return max(0.0, 1.0 - total)
    return min(1.0, n - total)


def ideal_distance(ante: NormalizedAntecedent, z: Sequence[bool]) -> int:
    """Indicator of the antecedent; ``z`` gives each literal's atom value."""
    vals = [bool(v) != lit.negated for v, lit in zip(z, ante.literals, strict=True)]
    holds = all(vals) if ante.form == "conjunction" else any(vals)
    return int(holds)


def ideal_of(d: DistanceExpr, z: Sequence[bool]) -> int:
    """Indicator semantics of a compiled distance on a Boolean input."""
    vals = [bool(v) != neg for v, neg in zip(z, d.negations, strict=True)]
    if d.form == CONJ:
        return int(all(vals))
    if d.form == DISJ:
        return int(any(vals))
    if d.form == NEG_DISJ:
        return int(not any(vals))
    return int(not all(vals))
