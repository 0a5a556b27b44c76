import numpy as np
import pytest

from logaug.augment import augment_pipeline, compile_program
from logaug.errors import EmptyDataset
from logaug.runtime import forward, init_params
from logaug.tasks import PROGRAM_NAMES, TASKS, get_task, resolve_rules, rule_programs, rule_set
from logaug.tasks.alignment import (
    alignment_param_count,
    build_alignment_model,
    gen_alignment,
    gold_coverage,
    span_f1,
)
from logaug.tasks.base import MIN_DEV, make_batches, sample_fraction
from logaug.tasks.nli import LABELS as NLI_LABELS
from logaug.tasks.nli import build_inference_model, gen_inference, inference_param_count, relatedness, unaligned
from logaug.tasks.tagging import (
    FORBIDDEN,
    LABELS,
    build_tagger_model,
    gen_tagging,
    noun_violations,
    tagger_param_count,
    violations,
)
from logaug.tasks.train import evaluate, train_cell


def test_generators_are_deterministic():
    tcfg, ncfg = get_task("tag").config(), get_task("nli").config()
    assert gen_tagging(3, 20, tcfg) == gen_tagging(3, 20, tcfg)
    assert gen_tagging(3, 20, tcfg) != gen_tagging(4, 20, tcfg)
    assert gen_inference(3, 20, ncfg) == gen_inference(3, 20, ncfg)
    a, ta = gen_alignment(3, 20, noise=0.2)
    b, tb = gen_alignment(3, 20, noise=0.2)
    assert a == b and ta.entries == tb.entries


def test_alignment_table_coverage():
    ex, table = gen_alignment(0, 1000, noise=0.3)
    assert gold_coverage(ex, table) == pytest.approx(0.7, abs=0.05)
    ex, table = gen_alignment(0, 200, noise=0.0)
    assert gold_coverage(ex, table) == 1.0


def test_tagging_labels_are_valid_bio():
    for ex in gen_tagging(1, 300, get_task("tag").config()):
        assert len(ex.tokens) == len(ex.labels) == len(ex.nouns)
        prev = "O"
        for lab in ex.labels:
            if lab.startswith("I-"):
                assert prev[2:] == lab[2:], ex
            prev = lab
        assert violations([ex.labels]) == 0
        assert noun_violations([ex.labels], [ex]) == 0


def test_tagging_noise_flips_noun_bits():
    cfg = get_task("tag").config()
    clean, noisy = gen_tagging(2, 300, cfg), gen_tagging(2, 300, cfg, noise=0.2)
    flips = sum(a != b for x, y in zip(clean, noisy) for a, b in zip(x.nouns, y.nouns))
    total = sum(len(x.nouns) for x in clean)
    assert 0.15 < flips / total < 0.25


def test_inference_labels_follow_alignment():
    cfg = get_task("nli").config()
    table = relatedness(cfg)
    data = gen_inference(0, 2000, cfg, counter_rate=0.15)
    counter = [ex for ex in data if ex.label == "Entail" and unaligned(ex, table)]
    assert len(counter) / len(data) == pytest.approx(0.15, abs=0.03)
    for ex in data:
        if ex.label == "Neutral":
            assert unaligned(ex, table)
        if ex.label == "Contradict":
            assert "not" in ex.hypothesis and not unaligned(ex, table)
    clean = gen_inference(0, 500, cfg, counter_rate=0.0)
    assert not [ex for ex in clean if ex.label == "Entail" and unaligned(ex, table)]


def test_parameter_counts_closed_form():
    acfg, tcfg, ncfg = (get_task(n).config() for n in ("align", "tag", "nli"))
    assert build_alignment_model(acfg, 2, 7, 5).parameter_count() == alignment_param_count(acfg)
    assert build_tagger_model(tcfg, 2, 6).parameter_count() == tagger_param_count(tcfg)
    assert build_inference_model(ncfg, 2, 5, 4).parameter_count() == inference_param_count(ncfg)
    # by hand for the default tagger: D=12, H=12, 7 labels
    V = tcfg["vocab"]
    assert tagger_param_count(tcfg) == V * 12 + 6 * (144 + 144 + 12) + 24 * 7 + 7


@pytest.mark.parametrize("name", sorted(TASKS))
def test_outputs_are_normalized(name):
    task = get_task(name)
    cfg = task.config(n_train=10, n_dev=4, n_test=4)
    sp = task.splits(cfg)
    b = task.batch(sp.train_pool[:5], cfg, sp.tables)
    g = task.build(cfg, b.dims)
    vals, _ = forward(g, {**b.bindings, **init_params(g, 0)})
    out = {"align": ["att", "start", "end"], "tag": ["y"], "nli": ["label", "att_hp", "att_ph"]}[name]
    axis = {"att": 2, "start": 1, "end": 1, "y": -1, "label": 1, "att_hp": 1, "att_ph": 2}
    for o in out:
        v = vals[g.lookup(o)]
        assert np.abs(v.sum(axis=axis[o]) - 1).max() < 1e-9


def test_zero_length_tagger():
    cfg = get_task("tag").config()
    g = build_tagger_model(cfg, 2, 0)
    vals, _ = forward(g, {"x": np.zeros((2, 0, cfg["vocab"])), "mask": np.zeros((2, 0)), **init_params(g, 0)})
    assert vals[g.lookup("y")].shape == (2, 0, len(LABELS))


def test_shipped_programs_compile_and_apply():
    progs = rule_programs()
    assert set(progs) == set(PROGRAM_NAMES)
    for p in progs.values():
        assert compile_program(p).rules
    for name, task in TASKS.items():
        cfg = task.config(n_train=10, n_dev=4, n_test=4)
        sp = task.splits(cfg)
        b = task.batch(sp.train_pool[:3], cfg, sp.tables)
        for label in task.rule_sets:
            g = augment_pipeline(rule_set(task, label), task.build(cfg, b.dims), b.contexts)
            task.add_loss(g, b.dims)
            vals, _ = forward(g, {**b.bindings, **init_params(g, 0)})
            assert np.isfinite(vals[g.lookup("loss")])


def test_resolve_rules(tmp_path):
    task = get_task("tag")
    assert resolve_rules(task, None) is None and resolve_rules(task, "none") is None
    assert len(resolve_rules(task, "C1:5").statements) == 5
    assert len(resolve_rules(task, "C1,C2").statements) == 2
    f = tmp_path / "mine.rules"
    f.write_text('pred Yc(2) neuron "y\'[{0},{1}]"\nforall t in T: Yc(t, "O") -> Yc(t, "O") @rho=1\n')
    assert len(resolve_rules(task, str(f)).statements) == 1
    with pytest.raises(FileNotFoundError):
        resolve_rules(task, "nope")
    with pytest.raises(ValueError):
        get_task("parsing")


def test_metric_fixtures():
    assert span_f1((2, 4), (2, 4)) == 1.0
    assert span_f1((2, 3), (3, 4)) == pytest.approx(0.5)
    assert span_f1((0, 0), (3, 4)) == 0.0
    seqs = [("B-VP", "I-NP", "I-VP", "I-NP"), ("B-PP", "I-VP")]
    assert violations(seqs) == 4
    assert set(FORBIDDEN) == {("B-VP", "I-NP"), ("I-NP", "I-VP"), ("I-VP", "I-NP"), ("B-PP", "I-VP")}
    tag = get_task("tag")
    ex = gen_tagging(0, 2, tag.config())
    assert tag.score([e.labels for e in ex], ex, "token_acc") == 1.0
    nli = get_task("nli")
    nex = gen_inference(0, 4, nli.config())
    assert nli.score([e.label for e in nex], nex, "label_acc") == 1.0
    assert nli.score([NLI_LABELS[0]] * 4, nex) == sum(e.label == "Entail" for e in nex) / 4


def test_empty_inputs_raise():
    with pytest.raises(EmptyDataset):
        make_batches([], 4)
    for task in TASKS.values():
        with pytest.raises(EmptyDataset):
            task.batch([], task.config())
        with pytest.raises(EmptyDataset):
            task.score([], [], task.metrics[0])
    with pytest.raises(EmptyDataset):
        evaluate(get_task("tag"), get_task("tag").config(), {}, [])


def test_sample_fraction():
    pool, dev = list(range(1000)), list(range(1000, 1100))
    tr, dv = sample_fraction(pool, dev, 0.05, 0)
    assert len(tr) + len(dv) - (MIN_DEV - 5) == 50 and len(dv) == MIN_DEV
    assert not set(tr) & set(dv)
    assert sample_fraction(pool, dev, 0.05, 0) == (tr, dv)
    assert sample_fraction(pool, dev, 0.05, 1)[0] != tr
    with pytest.raises(ValueError):
        sample_fraction(pool, dev, 1.5, 0)
    with pytest.raises(ValueError):
        sample_fraction(pool, dev, 0.0, 0)


def test_train_cell_is_reproducible():
    task = get_task("tag")
    cfg = task.config(n_train=80, n_dev=40, n_test=40, epochs=2)
    sp = task.splits(cfg)
    a = train_cell(task, cfg, sp, 0.5, 0, rule_set(task, "C1:5"), 4.0, "C1:5")
    b = train_cell(task, cfg, sp, 0.5, 0, rule_set(task, "C1:5"), 4.0, "C1:5")
    assert a.metric == b.metric and a.rho == "4"
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    base = train_cell(task, cfg, sp, 0.5, 0)
    assert base.rho == "-" and base.rules == "none"


def test_shipped_rule_weights():
    want = {"R1": 2, "R2": 2, "N1": 8, "N2": 8, "N3": 2, "C1": 4, "C2": 4, "C3": 4, "C4": 4, "C5": 16}
    got = {name: {st.rho for st in p.statements} for name, p in rule_programs().items()}
    assert got == {name: {float(rho)} for name, rho in want.items()}
