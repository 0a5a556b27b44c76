import numpy as np
import pytest

from logaug.augment import (
    AuxiliaryLayerSpec,
    AuxRef,
    ConstRef,
    ElementRef,
    ExternalPredicateTable,
    GroundedConstraint,
    GroundingContext,
    apply_auxiliary,
    apply_constraints,
    augment_pipeline,
    rewrite,
    compile_program,
)
from logaug.errors import CyclicRule, NoPreActivation, UnknownIndexSet, UnknownTable
from logaug.graph import ComputationGraph, is_upstream
from logaug.rules import HARD, merge_programs, parse_program
from logaug.runtime import forward, init_params
from logaug.softlogic import CONJ, DISJ, NEG_CONJ, NEG_DISJ, DistanceExpr, eval_distance
from logaug.tasks import get_task, rule_set, rule_source
from logaug.tasks.alignment import build_alignment_model
from logaug.tasks.nli import LABELS as NLI_LABELS
from logaug.tasks.nli import build_inference_model
from logaug.tasks.tagging import build_tagger_model


def sigmoid_graph():
    g = ComputationGraph()
    x = g.input("x", (1,))
    g.input("z", (1,))
    g.add("sigmoid", [g.add("affine", [x])], name="r")
    return g


def test_single_rule_worked_value():
    # s = 0, rho = 2, antecedent fully true: sigmoid(2) = 0.8808
    g = apply_constraints(sigmoid_graph(), [GroundedConstraint(
        ElementRef("r", 0), DistanceExpr(CONJ, ((ElementRef("z", 0), False),)), rho=2.0)])
    vals, _ = forward(g, {"x": np.zeros(1), "z": np.ones(1)})
    assert vals[g.lookup("r'")][0] == pytest.approx(0.8808, abs=1e-4)
    # the negated consequent pushes the other way
    g = apply_constraints(sigmoid_graph(), [GroundedConstraint(
        ElementRef("r", 0), DistanceExpr(CONJ, ((ElementRef("z", 0), False),)), rho=2.0, sign=-1)])
    vals, _ = forward(g, {"x": np.zeros(1), "z": np.ones(1)})
    assert vals[g.lookup("r'")][0] == pytest.approx(1 - 0.8808, abs=1e-4)


def test_zero_distance_is_bit_identical():
    cfg = get_task("align").config()
    g = build_alignment_model(cfg, 2, 5, 4)
    cs = [GroundedConstraint(ElementRef("att", k), DistanceExpr(CONJ, ((ConstRef(0.0), False),)), rho=3.0)
          for k in range(0, 40, 3)]
    aug = apply_constraints(g, cs)
    rng = np.random.default_rng(0)
    binds = {"xp": rng.random((2, 5, cfg["vocab"])), "xq": rng.random((2, 4, cfg["vocab"])),
             "pbias": np.zeros((2, 5)), "qbias": np.zeros((2, 1, 4)), **init_params(g, 1)}
    before, _ = forward(g, binds)
    after, _ = forward(aug, binds)
    for name in ("att", "start", "end"):
        assert before[g.lookup(name)].tobytes() == after[aug.resolve(name + "'")].tobytes()
    assert aug.parameters() == g.parameters()


@pytest.mark.parametrize("form", [CONJ, DISJ, NEG_DISJ, NEG_CONJ])
def test_auxiliary_matches_reference_exactly(form):
    rng = np.random.default_rng(4)
    g = ComputationGraph()
    g.add("sigmoid", [g.input("u", (6,))], name="z")
    dists = []
    for _ in range(5):
        k = int(rng.integers(1, 6))
        idx = rng.choice(6, size=k, replace=False)
        dists.append(DistanceExpr(form, tuple((ElementRef("z", int(i)), bool(rng.random() < 0.5)) for i in idx)))
    aug, nid = apply_auxiliary(g, AuxiliaryLayerSpec("aux", dists))
    vals, _ = forward(aug, {"u": rng.normal(size=6)})
    z = vals[g.lookup("z")]
    want = [eval_distance(d, [z[r.index] for r in d.refs]) for d in dists]
    assert vals[nid].tolist() == want


def test_aux_ref_feeds_constraint():
    g = sigmoid_graph()
    g.add("sigmoid", [g.input("w", (2,))], name="q")
    aux = AuxiliaryLayerSpec("A", DistanceExpr(DISJ, ((ElementRef("q", 0), False), (ElementRef("q", 1), False))))
    c = GroundedConstraint(ElementRef("r", 0), DistanceExpr(CONJ, ((AuxRef("A", 0), False),)), rho=1.0)
    aug = rewrite(g, [c], [aux])
    vals, _ = forward(aug, {"x": np.zeros(1), "z": np.zeros(1), "w": np.zeros(2)})
    assert vals[aug.lookup("A")][0] == pytest.approx(1.0)
    assert vals[aug.lookup("r'")][0] == pytest.approx(1 / (1 + np.exp(-1.0)))


def align_ctx(lp=5, lq=4, batch_index=0):
    table = ExternalPredicateTable("relate.tsv", 2, {("w1", "w1"): 1.0})
    return GroundingContext({"Cp": list(range(lp)), "Cq": list(range(1, lq))}, {"relate.tsv": table},
                            {"p": [f"w{i}" for i in range(lp)], "q": ["what"] + [f"w{i}" for i in range(1, lq)]},
                            batch_index)


def test_conservative_rule_topology_and_counts():
    cfg = get_task("align").config()
    g = build_alignment_model(cfg, 1, 5, 4)
    aug, res = augment_pipeline(rule_set(get_task("align"), "R2"), g, align_ctx(), return_result=True)
    assert sum(res.counts.values()) == 5 * 3
    att, att_c = aug.lookup("att"), aug.lookup("att'")
    assert aug.node(att_c).op == "softmax"
    # the unconstrained layer feeds the constrained copy, never the reverse
    assert is_upstream(aug, att, att_c) and not is_upstream(aug, att_c, att)
    # downstream heads read the constrained attention
    assert is_upstream(aug, att_c, aug.resolve("start'"))


def test_pairwise_tag_rules_drop_offsets():
    task = get_task("tag")
    cfg = task.config()
    T = 7
    g = build_tagger_model(cfg, 1, T)
    prog = merge_programs(parse_program(rule_source(n)) for n in ("C1", "C2", "C3", "C4"))
    ctx = GroundingContext({"T": list(range(T))}, {}, {}, 0)
    _, res = augment_pipeline(prog, g, ctx, return_result=True)
    assert sum(res.counts.values()) == 4 * (T - 1)
    assert len({c.consequent.index for c in res.constraints}) <= 4 * (T - 1)


def test_unaligned_rule_builds_two_stacks_and_hits_entail_only():
    task = get_task("nli")
    cfg = task.config()
    g = build_inference_model(cfg, 2, 5, 4)
    ctxs = [GroundingContext({"Cp": [1, 2, 3, 4], "Ch": [1, 2, 3]}, {}, {}, b) for b in range(2)]
    aug, res = augment_pipeline(rule_set(task, "N3"), g, ctxs, return_result=True)
    assert {"Z1", "Z2", "Z1.inner", "Z2.inner"} <= set(res.aux_specs)
    assert len(res.aux_specs["Z1.inner"].distances) == 2 * 3
    assert len(res.constraints) == 2
    e = NLI_LABELS.index("Entail")
    assert {c.consequent.index for c in res.constraints} == {e, len(NLI_LABELS) + e}
    assert all(c.sign == -1 for c in res.constraints)
    assert aug.node(aug.lookup("label'")).op == "softmax"


def test_cyclic_rule_is_refused():
    g = build_alignment_model(get_task("align").config(), 1, 5, 4)
    prog = parse_program(
        'pred S(1) neuron "start[{0}]"\n'
        'pred Ac(2) neuron "att\'[{0},{1}]"\n'
        "forall i in Cp, j in Cq: S(i) -> Ac(i,j) @rho=1\n")
    with pytest.raises(CyclicRule) as exc:
        augment_pipeline(prog, g, align_ctx())
    assert "start" in str(exc.value)


def test_grounding_errors():
    g = build_alignment_model(get_task("align").config(), 1, 5, 4)
    r1 = rule_set(get_task("align"), "R1")
    ctx = align_ctx()
    with pytest.raises(UnknownIndexSet):
        augment_pipeline(r1, g, GroundingContext({"Cp": [0]}, ctx.tables, ctx.sequences, 0))
    with pytest.raises(UnknownTable):
        augment_pipeline(r1, g, GroundingContext(ctx.index_sets, {}, ctx.sequences, 0))
    leaf = parse_program('pred A(2) neuron "att[{0},{1}]"\npred X(2) neuron "xp[{0},{1}]"\n'
                         "forall i in Cp, j in Cq: A(i,j) -> X(i,j)\n")
    with pytest.raises(NoPreActivation):
        augment_pipeline(leaf, g, ctx)


def test_rho_override_and_hard():
    prog = rule_set(get_task("tag"), "C5")
    assert compile_program(prog).rules[0].statement.rho == 16
    assert compile_program(prog, rho=3).rules[0].statement.rho == 3.0
    assert compile_program(prog, rho=HARD).rules[0].statement.rho == HARD


def test_grounded_constraint_validation():
    d = DistanceExpr(CONJ, ((ConstRef(1.0), False),))
    with pytest.raises(ValueError):
        GroundedConstraint(ElementRef("r", 0), d, rho=0.0)
    with pytest.raises(ValueError):
        GroundedConstraint(ElementRef("r", 0), d, sign=2)


def test_table_round_trip(tmp_path):
    t = ExternalPredicateTable("rel", 2, {("a", "b"): 1.0, ("c", "d"): 0.25}, default=0.1)
    t.save(tmp_path / "rel.tsv")
    back = ExternalPredicateTable.load(tmp_path / "rel.tsv", "rel")
    assert back.entries == t.entries and back.default == 0.1 and back.arity == 2
    assert back.degree(("x", "y")) == 0.1
    with pytest.raises(ValueError):
        ExternalPredicateTable("bad", 1, {("a",): 1.5})
