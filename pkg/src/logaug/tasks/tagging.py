"""Chunk tagging analog: a bidirectional gated recurrent tagger over toy sentences.

Sentences are generated from a small chunk grammar. A share of the
vocabulary is noun/verb ambiguous; which reading applies is decided by the
preceding words, so a tagger can learn it from context given enough data.
The noun mask ``N_t`` is per-example side information (not a model input).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import ExternalPredicateTable, GroundingContext
from ..errors import EmptyDataset
from ..graph import ComputationGraph
from .base import Batch, Splits, Task, linear, one_hot, rng_for

LABELS = ("B-NP", "I-NP", "B-VP", "I-VP", "B-PP", "I-PP", "O")
# (label at t, label at t+1) pairs forbidden by the pairwise rules
FORBIDDEN = (("B-VP", "I-NP"), ("I-NP", "I-VP"), ("I-VP", "I-NP"), ("B-PP", "I-VP"))
NON_NP = ("B-VP", "I-VP", "B-PP", "I-PP")


@dataclass(frozen=True)
class TaggingExample:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    nouns: tuple[int, ...]

    def to_row(self) -> str:
        return "\t".join([" ".join(self.tokens), " ".join(self.labels), " ".join(map(str, self.nouns))])

    @classmethod
    def from_row(cls, row: str) -> "TaggingExample":
        toks, labels, nouns = (row.rstrip("\n").split("\t") + ["", ""])[:3]
        return cls(tuple(toks.split()), tuple(labels.split()), tuple(int(v) for v in nouns.split()))


def vocabulary(cfg: dict) -> dict[str, list[str]]:
    sizes = {"det": 4, "adj": 12, "noun": cfg["n_nouns"], "amb": cfg["n_ambiguous"], "verb": cfg["n_verbs"],
             "aux": 4, "prep": 8, "prep2": 3, "punct": 2}
    return {k: [f"{k}{i}" for i in range(n)] for k, n in sizes.items()}


def token_index(cfg: dict) -> dict[str, int]:
    words = [w for ws in vocabulary(cfg).values() for w in ws] + ["of"]
    return {w: i for i, w in enumerate(words)}


class _Sentence:
    def __init__(self, rng, vocab, p_amb):
        self.rng, self.vocab, self.p_amb = rng, vocab, p_amb
        self.toks: list[str] = []
        self.labels: list[str] = []
        self.nouns: list[int] = []

    def word(self, kind: str) -> str:
        ws = self.vocab[kind]
        return ws[self.rng.integers(len(ws))]

    def emit(self, tok, label, noun=0):
        self.toks.append(tok)
        self.labels.append(label)
        self.nouns.append(noun)

    def np_(self, bare_ok: bool = True):
        first = True
        if self.rng.random() < 0.7 or not bare_ok:
            self.emit(self.word("det"), "B-NP")
            first = False
        for _ in range(self.rng.choice(3, p=[0.55, 0.35, 0.1])):
            self.emit(self.word("adj"), "B-NP" if first else "I-NP")
            first = False
        head = "amb" if self.rng.random() < self.p_amb else "noun"
        self.emit(self.word(head), "B-NP" if first else "I-NP", 1)
        if self.rng.random() < 0.15:
            self.emit(self.word("noun"), "I-NP", 1)

    def vp(self):
        first = True
        if self.rng.random() < 0.3:
            self.emit(self.word("aux"), "B-VP")
            first = False
        head = "amb" if self.rng.random() < self.p_amb else "verb"
        self.emit(self.word(head), "B-VP" if first else "I-VP")

    def pp(self):
        if self.rng.random() < 0.2:
            self.emit(self.word("prep2"), "B-PP")
            self.emit("of", "I-PP")
        else:
            self.emit(self.word("prep"), "B-PP")
        self.np_()


def gen_tagging(seed: int, n: int, cfg: dict, noise: float = 0.0) -> list[TaggingExample]:
    """Sentences ``NP VP [NP] [PP] [, NP VP] .`` with BIO chunk labels.

    ``noise`` flips each noun-mask bit independently with that probability.
    """
    vocab = vocabulary(cfg)
    rng = rng_for(seed, 7)
    out = []
    for _ in range(n):
        s = _Sentence(rng, vocab, cfg["p_ambiguous"])
        s.np_()
        s.vp()
        if rng.random() < 0.6:
            s.np_(bare_ok=False)
        if rng.random() < 0.5:
            s.pp()
        if rng.random() < 0.3:
            s.emit(vocab["punct"][0], "O")
            s.np_(bare_ok=False)
            s.vp()
        s.emit(vocab["punct"][1], "O")
        nouns = [1 - v if rng.random() < noise else v for v in s.nouns]
        out.append(TaggingExample(tuple(s.toks), tuple(s.labels), tuple(nouns)))
    return out


def violations(pred_labels, pairs=FORBIDDEN) -> int:
    """Adjacent label pairs that break the pairwise rules."""
    bad = set(pairs)
    return sum((a, b) in bad for seq in pred_labels for a, b in zip(seq, seq[1:]))


def noun_violations(pred_labels, examples) -> int:
    return sum(
        n == 1 and lab in NON_NP
        for seq, ex in zip(pred_labels, examples)
        for lab, n in zip(seq, ex.nouns)
    )


def _gru_step(g, e, h, p, m=None):
    z = g.add("sigmoid", [g.add("add", [g.add("add", [g.add("matmul", [e, p["Wz"]]), g.add("matmul", [h, p["Uz"]])]), p["bz"]])])
    r = g.add("sigmoid", [g.add("add", [g.add("add", [g.add("matmul", [e, p["Wr"]]), g.add("matmul", [h, p["Ur"]])]), p["br"]])])
    rh = g.add("matmul", [g.add("mul", [r, h]), p["Un"]])
    n = g.add("tanh", [g.add("add", [g.add("add", [g.add("matmul", [e, p["Wn"]]), rh]), p["bn"]])])
    h_new = g.add("add", [n, g.add("mul", [z, g.add("sub", [h, n])])])
    if m is None:
        return h_new
    # padded steps keep the previous state
    return g.add("add", [h, g.add("mul", [m, g.add("sub", [h_new, h])])])


def build_tagger_model(cfg: dict, batch: int = 1, length: int = 1) -> ComputationGraph:
    """Embedding, forward and backward gated recurrences, per-token softmax ``y``."""
    V, D, H, L = cfg["vocab"], cfg["emb_dim"], cfg["hidden"], len(LABELS)
    g = ComputationGraph()
    x = g.input("x", (batch, length, V))
    mask = g.input("mask", (batch, length))
    emb = g.parameter("emb", (V, D))
    cells = {}
    for d in ("fw", "bw"):
        p = {}
        for gate in "zrn":
            p["W" + gate] = g.parameter(f"{d}.W{gate}", (D, H))
            p["U" + gate] = g.parameter(f"{d}.U{gate}", (H, H))
            p["b" + gate] = g.parameter(f"{d}.b{gate}", (H,))
        cells[d] = p
    w_out = g.parameter("out.W", (2 * H, L))
    b_out = g.parameter("out.b", (L,))
    if length == 0:
        hs = g.constant(np.zeros((batch, 0, 2 * H)))
    else:
        xe = g.add("matmul", [x, emb])
        steps = [g.add("select", [xe], axis=1, index=t) for t in range(length)]
        h0 = g.constant(np.zeros((batch, H)))
        fw, h = [], h0
        for t in range(length):
            h = _gru_step(g, steps[t], h, cells["fw"])
            fw.append(h)
        bw, h = [None] * length, h0
        for t in reversed(range(length)):
            m = g.add("reshape", [g.add("select", [mask], axis=1, index=t)], shape=(batch, 1))
            h = _gru_step(g, steps[t], h, cells["bw"], m)
            bw[t] = h
        cols = [g.add("reshape", [g.add("concat", [f, b], axis=1)], shape=(batch, 1, 2 * H)) for f, b in zip(fw, bw)]
        hs = cols[0] if length == 1 else g.add("concat", cols, axis=1)
    scores = linear(g, hs, w_out, b_out)
    g.add("softmax", [scores], name="y", axis=-1, labels={2: LABELS})
    return g


def tagger_param_count(cfg: dict) -> int:
    V, D, H, L = cfg["vocab"], cfg["emb_dim"], cfg["hidden"], len(LABELS)
    return V * D + 2 * 3 * (D * H + H * H + H) + 2 * H * L + L


class TaggingTask(Task):
    name = "tag"
    metrics = ("token_acc", "violations", "noun_violations")
    rule_sets = {
        "C1:5": ("C1", "C2", "C3", "C4", "C5"),
        "C1:4": ("C1", "C2", "C3", "C4"),
        "C5": ("C5",),
    }
    defaults = {
        "data_seed": 0, "n_train": 1000, "n_dev": 200, "n_test": 300, "noise": 0.0,
        "n_nouns": 60, "n_verbs": 40, "n_ambiguous": 30, "p_ambiguous": 0.35,
        "emb_dim": 12, "hidden": 12, "epochs": 25, "lr": 0.02, "batch_size": 16,
    }

    def config(self, **overrides) -> dict:
        cfg = super().config(**overrides)
        cfg["vocab"] = len(token_index(cfg))
        return cfg

    def splits(self, cfg: dict) -> Splits:
        n = cfg["n_train"] + cfg["n_dev"] + cfg["n_test"]
        data = gen_tagging(cfg["data_seed"], n, cfg, cfg["noise"])
        a, b = cfg["n_train"], cfg["n_train"] + cfg["n_dev"]
        return Splits(data[:a], data[a:b], data[b:])

    def batch(self, examples, cfg, tables=None) -> Batch:
        if not examples:
            raise EmptyDataset("empty batch")
        index = token_index(cfg)
        T = max(len(ex.tokens) for ex in examples)
        ids = [[index[w] for w in ex.tokens] for ex in examples]
        mask = np.zeros((len(examples), T))
        gold = np.zeros((len(examples), T, len(LABELS)))
        contexts = []
        for b, ex in enumerate(examples):
            n = len(ex.tokens)
            mask[b, :n] = 1.0
            for t, lab in enumerate(ex.labels):
                gold[b, t, LABELS.index(lab)] = 1.0
            nouns = ExternalPredicateTable("nouns", 1, {(str(t),): float(v) for t, v in enumerate(ex.nouns)})
            contexts.append(GroundingContext({"T": list(range(n))}, {"nouns": nouns}, {}, b))
        bindings = {"x": one_hot(ids, T, cfg["vocab"]), "mask": mask, "gold": gold}
        return Batch(examples, bindings, contexts, {"batch": len(examples), "length": T,
                                                    "tokens": int(mask.sum())})

    def build(self, cfg, dims) -> ComputationGraph:
        return build_tagger_model(cfg, dims["batch"], dims["length"])

    def add_loss(self, g, dims) -> int:
        gold = g.input("gold", g.node(g.lookup("y")).shape)
        return g.add("cross_entropy", [self.output(g, "y"), gold], name="loss", scale=1.0 / max(dims["tokens"], 1))

    def predict(self, g, values, batch) -> list:
        y = values[self.output(g, "y")]
        return [tuple(LABELS[k] for k in y[b, : len(ex.tokens)].argmax(axis=-1)) for b, ex in enumerate(batch.examples)]

    def score(self, preds, examples, metric="token_acc") -> float:
        if not examples:
            raise EmptyDataset("no examples to score")
        if metric == "token_acc":
            hit = sum(p == q for seq, ex in zip(preds, examples) for p, q in zip(seq, ex.labels))
            total = sum(len(ex.labels) for ex in examples)
            return hit / total if total else 1.0
        if metric == "violations":
            return float(violations(preds))
        if metric == "noun_violations":
            return float(noun_violations(preds, examples))
        raise ValueError(f"metric {metric!r} is not defined for task {self.name!r}")
