"""Inference analog: decomposable attention over toy premise/hypothesis pairs.

Labels follow the alignment structure. A hypothesis whose content words all
align to the premise (same word or a related one) is an entailment, adding
``not`` makes it a contradiction, and an unaligned content word makes it
neutral. Counter-examples to the "unaligned means not entailment" rule are
planted at a configurable rate: an entailment whose hypothesis carries a
generic word with no premise counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import ExternalPredicateTable, GroundingContext
from ..errors import EmptyDataset
from ..graph import ComputationGraph
from .base import MASK_BIAS, Batch, Splits, Task, linear, one_hot, rng_for

LABELS = ("Entail", "Contradict", "Neutral")
NULL = "NULL"
NOT = "not"


@dataclass(frozen=True)
class InferenceExample:
    premise: tuple[str, ...]
    hypothesis: tuple[str, ...]
    label: str
    cp: tuple[int, ...]
    ch: tuple[int, ...]

    def to_row(self) -> str:
        return "\t".join([" ".join(self.premise), " ".join(self.hypothesis), self.label,
                          " ".join(map(str, self.cp)), " ".join(map(str, self.ch))])

    @classmethod
    def from_row(cls, row: str) -> "InferenceExample":
        p, h, lab, cp, ch = row.rstrip("\n").split("\t")
        return cls(tuple(p.split()), tuple(h.split()), lab,
                   tuple(int(v) for v in cp.split()), tuple(int(v) for v in ch.split()))


def vocabulary(cfg: dict) -> list[str]:
    return ([NULL, NOT] + [f"c{i}" for i in range(cfg["n_content"])]
            + [f"s{i}" for i in range(cfg["n_synonyms"])] + [f"g{i}" for i in range(cfg["n_generic"])])


def relatedness(cfg: dict) -> ExternalPredicateTable:
    """Identity on content words plus each ``c_k``/``s_k`` synonym pair."""
    entries = {(f"c{i}", f"c{i}"): 1.0 for i in range(cfg["n_content"])}
    for i in range(cfg["n_synonyms"]):
        entries[(f"c{i}", f"s{i}")] = 1.0
        entries[(f"s{i}", f"c{i}")] = 1.0
    return ExternalPredicateTable("relate.tsv", 2, entries)


def gen_inference(seed: int, n: int, cfg: dict, counter_rate: float | None = None) -> list[InferenceExample]:
    rate = cfg["counter_rate"] if counter_rate is None else counter_rate
    rng = rng_for(seed, 11)
    nc, ns, ng = cfg["n_content"], cfg["n_synonyms"], cfg["n_generic"]
    out = []
    for _ in range(n):
        k = int(rng.integers(3, 7))
        ids = rng.choice(nc, size=k, replace=False)
        premise = [NULL] + [f"c{i}" for i in ids]
        m = int(rng.integers(2, 5))
        aligned = []
        for i in rng.choice(ids, size=m, replace=True):
            aligned.append(f"s{i}" if i < ns and rng.random() < 0.4 else f"c{i}")
        if rng.random() < rate:
            label = "Entail"
            aligned[int(rng.integers(m))] = f"g{rng.integers(ng)}"
            words = aligned
        else:
            label = LABELS[int(rng.integers(3))]
            words = aligned
            if label == "Contradict":
                words.insert(int(rng.integers(m + 1)), NOT)
            elif label == "Neutral":
                novel = [i for i in range(nc) if i not in set(ids)]
                words[int(rng.integers(m))] = f"c{novel[int(rng.integers(len(novel)))]}"
        hyp = [NULL] + words
        cp = tuple(range(1, len(premise)))
        ch = tuple(j for j in range(1, len(hyp)) if hyp[j] != NOT)
        out.append(InferenceExample(tuple(premise), tuple(hyp), label, cp, ch))
    return out


def unaligned(ex: InferenceExample, table: ExternalPredicateTable) -> bool:
    """True iff some hypothesis content word has no related premise word."""
    return any(all(table.degree((ex.premise[i], ex.hypothesis[j])) == 0 for i in ex.cp) for j in ex.ch)


def build_inference_model(cfg: dict, batch: int = 1, lp: int = 2, lh: int = 2) -> ComputationGraph:
    """Shared encoder, attention in both directions, compare-aggregate head ``label``."""
    V, D, G = cfg["vocab"], cfg["emb_dim"], cfg["hidden"]
    g = ComputationGraph()
    xp = g.input("xp", (batch, lp, V))
    xh = g.input("xh", (batch, lh, V))
    pbias = g.input("pbias", (batch, lp, 1))
    hbias = g.input("hbias", (batch, 1, lh))
    pmask = g.input("pmask", (batch, lp, 1))
    hmask = g.input("hmask", (batch, lh, 1))
    emb = g.parameter("emb", (V, D))
    w_enc = g.parameter("enc.W", (D, D))
    w_att = g.parameter("att.W", (D, D))
    w_cmp = g.parameter("cmp.W", (3 * D, G))
    b_cmp = g.parameter("cmp.b", (G,))
    w_out = g.parameter("out.W", (2 * G, len(LABELS)))
    b_out = g.parameter("out.b", (len(LABELS),))

    def encode(x):
        return g.add("tanh", [g.add("matmul", [g.add("matmul", [x, emb]), w_enc])])

    P, H = encode(xp), encode(xh)
    scores = g.add("matmul", [g.add("matmul", [P, w_att]), g.add("transpose", [H], axes=(0, 2, 1))])
    a_hp = g.add("softmax", [g.add("add", [scores, pbias])], name="att_hp", axis=1)
    a_ph = g.add("softmax", [g.add("add", [scores, hbias])], name="att_ph", axis=2)
    beta = g.add("matmul", [g.add("transpose", [a_hp], axes=(0, 2, 1)), P])
    alpha = g.add("matmul", [a_ph, H])

    def compare(x, y, mask):
        f = g.add("concat", [x, y, g.add("mul", [x, y])], axis=2)
        c = g.add("relu", [linear(g, f, w_cmp, b_cmp)])
        return g.add("sum", [g.add("mul", [c, mask])], axis=1)

    v = g.add("concat", [compare(H, beta, hmask), compare(P, alpha, pmask)], axis=1)
    g.add("softmax", [linear(g, v, w_out, b_out)], name="label", axis=1, labels={1: LABELS})
    return g


def inference_param_count(cfg: dict) -> int:
    V, D, G = cfg["vocab"], cfg["emb_dim"], cfg["hidden"]
    return V * D + 2 * D * D + 3 * D * G + G + 2 * G * len(LABELS) + len(LABELS)


class InferenceTask(Task):
    name = "nli"
    metrics = ("label_acc",)
    rule_sets = {"N1": ("N1",), "N2": ("N2",), "N3": ("N3",), "N2,3": ("N2", "N3")}
    defaults = {
        "data_seed": 0, "n_train": 2000, "n_dev": 200, "n_test": 400, "counter_rate": 0.15,
        "n_content": 60, "n_synonyms": 30, "n_generic": 4,
        "emb_dim": 12, "hidden": 16, "epochs": 20, "lr": 0.02, "batch_size": 16,
    }

    def config(self, **overrides) -> dict:
        cfg = super().config(**overrides)
        cfg["vocab"] = len(vocabulary(cfg))
        return cfg

    def splits(self, cfg: dict) -> Splits:
        n = cfg["n_train"] + cfg["n_dev"] + cfg["n_test"]
        data = gen_inference(cfg["data_seed"], n, cfg)
        a, b = cfg["n_train"], cfg["n_train"] + cfg["n_dev"]
        return Splits(data[:a], data[a:b], data[b:], {"relate.tsv": relatedness(cfg)})

    def batch(self, examples, cfg, tables=None) -> Batch:
        if not examples:
            raise EmptyDataset("empty batch")
        index = {w: i for i, w in enumerate(vocabulary(cfg))}
        lp = max(len(ex.premise) for ex in examples)
        lh = max(len(ex.hypothesis) for ex in examples)
        B = len(examples)
        pmask, hmask = np.zeros((B, lp, 1)), np.zeros((B, lh, 1))
        gold = np.zeros((B, len(LABELS)))
        contexts = []
        for b, ex in enumerate(examples):
            pmask[b, : len(ex.premise)] = 1.0
            hmask[b, : len(ex.hypothesis)] = 1.0
            gold[b, LABELS.index(ex.label)] = 1.0
            contexts.append(GroundingContext({"Cp": list(ex.cp), "Ch": list(ex.ch)}, dict(tables or {}),
                                             {"p": list(ex.premise), "h": list(ex.hypothesis)}, b))
        bindings = {
            "xp": one_hot([[index[w] for w in ex.premise] for ex in examples], lp, cfg["vocab"]),
            "xh": one_hot([[index[w] for w in ex.hypothesis] for ex in examples], lh, cfg["vocab"]),
            "pmask": pmask, "hmask": hmask,
            "pbias": (1.0 - pmask) * MASK_BIAS,
            "hbias": np.transpose((1.0 - hmask) * MASK_BIAS, (0, 2, 1)),
            "gold": gold,
        }
        return Batch(examples, bindings, contexts, {"batch": B, "lp": lp, "lh": lh})

    def build(self, cfg, dims) -> ComputationGraph:
        return build_inference_model(cfg, dims["batch"], dims["lp"], dims["lh"])

    def add_loss(self, g, dims) -> int:
        gold = g.input("gold", (dims["batch"], len(LABELS)))
        return g.add("cross_entropy", [self.output(g, "label"), gold], name="loss", scale=1.0 / dims["batch"])

    def predict(self, g, values, batch) -> list:
        p = values[self.output(g, "label")]
        return [LABELS[k] for k in p.argmax(axis=1)]

    def score(self, preds, examples, metric="label_acc") -> float:
        if not examples:
            raise EmptyDataset("no examples to score")
        if metric != "label_acc":
            raise ValueError(f"metric {metric!r} is not defined for task {self.name!r}")
        return sum(p == ex.label for p, ex in zip(preds, examples)) / len(examples)
