import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logaug.errors import EmptyAntecedent, OutOfRange
from logaug.rules import Literal, NeuronBound, NormalizedAntecedent, Predicate, Var
from logaug.softlogic import (
    CONJ,
    DISJ,
    NEG_CONJ,
    NEG_DISJ,
    DistanceExpr,
    compile_distance,
    eval_distance,
    ideal_distance,
    ideal_of,
)


def ante(form, negs):
    preds = [Predicate(f"P{i}", 1, NeuronBound(f"p{i}[{{0}}]")) for i in range(len(negs))]
    return NormalizedAntecedent(form, tuple(Literal(p, (Var("x"),), n) for p, n in zip(preds, negs)))


def expr(form, n):
    return DistanceExpr(form, tuple((i, False) for i in range(n)))


# hand-evaluated rows of the four distance forms
@pytest.mark.parametrize(
    "form, z, want",
    [
        (CONJ, [1.0, 1.0], 1.0),
        (CONJ, [0.9, 0.8], 0.7),
        (CONJ, [0.3, 0.4], 0.0),
        (DISJ, [0.3, 0.4], 0.7),
        (DISJ, [0.9, 0.8], 1.0),
        (NEG_DISJ, [0.3, 0.4], 0.3),
        (NEG_DISJ, [0.9, 0.8], 0.0),
        (NEG_CONJ, [0.9, 0.8], 0.3),
        (NEG_CONJ, [0.3, 0.4], 1.0),
    ],
)
def test_forms_by_hand(form, z, want):
    assert eval_distance(expr(form, len(z)), z) == pytest.approx(want, abs=1e-12)


def test_negated_literal_enters_as_complement():
    d = DistanceExpr(CONJ, ((0, False), (1, True)))
    assert eval_distance(d, [0.9, 0.2]) == pytest.approx(0.7)


def test_all_negated_conjunction_compiles_to_negdisj():
    d = compile_distance(ante("conjunction", [True, True, True]))
    assert d.form == NEG_DISJ and d.negations == (False, False, False)
    d = compile_distance(ante("disjunction", [True, True]))
    assert d.form == NEG_CONJ
    d = compile_distance(ante("conjunction", [True, False]))
    assert d.form == CONJ and d.negations == (True, False)


def test_errors():
    with pytest.raises(EmptyAntecedent):
        DistanceExpr(CONJ, ())
    with pytest.raises(EmptyAntecedent):
        compile_distance(NormalizedAntecedent("conjunction", ()))
    with pytest.raises(OutOfRange) as exc:
        eval_distance(expr(DISJ, 2), [0.5, 1.2])
    assert exc.value.index == 1


def test_exhaustive_vertices_small():
    for n in range(1, 5):
        for form in ("conjunction", "disjunction"):
            for negs in itertools.product((False, True), repeat=n):
                a = ante(form, list(negs))
                d = compile_distance(a)
                for z in itertools.product((0.0, 1.0), repeat=n):
                    assert eval_distance(d, z) == ideal_distance(a, z) == ideal_of(d, z)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([CONJ, DISJ, NEG_DISJ, NEG_CONJ]), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_range_and_monotonicity(form, z):
    d = expr(form, len(z))
    v = eval_distance(d, z)
    assert 0.0 <= v <= 1.0
    # raising any input never lowers Conj/Disj and never raises the negated forms
    bumped = list(z)
    bumped[0] = min(1.0, z[0] + 0.1)
    w = eval_distance(d, bumped)
    if form in (CONJ, DISJ):
        assert w >= v
    else:
        assert w <= v


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_negdisj_is_conj_of_complements(z):
    a = eval_distance(expr(NEG_DISJ, len(z)), z)
    b = eval_distance(DistanceExpr(CONJ, tuple((i, True) for i in range(len(z)))), z)
    assert a == pytest.approx(b, abs=1e-12)


def test_affine_matches_forms():
    rng = np.random.default_rng(0)
    for form in (CONJ, DISJ, NEG_DISJ, NEG_CONJ):
        d = expr(form, 4)
        scale, shift = d.affine()
        for _ in range(20):
            z = rng.random(4)
            u = z.sum() * scale + shift
            u = max(u, 0.0) if d.clamps_below else min(u, 1.0)
            assert u == pytest.approx(eval_distance(d, z), abs=1e-12)
