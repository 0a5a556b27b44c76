"""Reading-comprehension analog: locate the paragraph word the query refers to.

Each query holds one content word that matches a paragraph word (the same
surface form or a related one from the relatedness table) plus distractor
words that match nothing. The answer is the single paragraph token aligned
with that word, so span prediction rides on the attention matrix ``att``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import ExternalPredicateTable, GroundingContext
from ..errors import EmptyDataset
from ..graph import ComputationGraph
from .base import MASK_BIAS, Batch, Splits, Task, one_hot, rng_for

QUERY_HEAD = "what"
FILLERS = ("the", "of", "a", "in", "and")


@dataclass(frozen=True)
class AlignmentExample:
    paragraph: tuple[str, ...]
    query: tuple[str, ...]
    gold: tuple[tuple[int, int], ...]
    cp: tuple[int, ...]
    cq: tuple[int, ...]
    answer: tuple[int, int]

    def to_row(self) -> str:
        pairs = " ".join(f"{i},{j}" for i, j in self.gold)
        return "\t".join([" ".join(self.paragraph), " ".join(self.query), pairs,
                          " ".join(map(str, self.cp)), " ".join(map(str, self.cq)), f"{self.answer[0]},{self.answer[1]}"])

    @classmethod
    def from_row(cls, row: str) -> "AlignmentExample":
        p, q, pairs, cp, cq, ans = row.rstrip("\n").split("\t")
        gold = tuple(tuple(int(v) for v in pr.split(",")) for pr in pairs.split())
        a, b = (int(v) for v in ans.split(","))
        return cls(tuple(p.split()), tuple(q.split()), gold,  # type: ignore[arg-type]
                   tuple(int(v) for v in cp.split()), tuple(int(v) for v in cq.split()), (a, b))


def vocabulary(vocab_size: int) -> list[str]:
    half = vocab_size // 2
    return [QUERY_HEAD, *FILLERS] + [f"w{i}" for i in range(vocab_size)] + [f"r{i}" for i in range(half)]


def related_pairs(vocab_size: int) -> list[tuple[str, str]]:
    half = vocab_size // 2
    pairs = [(f"w{i}", f"w{i}") for i in range(vocab_size)]
    pairs += [(f"w{i}", f"r{i}") for i in range(half)]
    return pairs


def gen_alignment(seed: int, n: int, vocab_size: int = 80, noise: float = 0.0):
    """Examples plus the relatedness table, with ``noise`` of its pairs withheld.

    Exactly ``round(noise * #pairs)`` related pairs are dropped from the
    table, so a gold pair is listed with probability close to ``1 - noise``.
    """
    rng = rng_for(seed, 13)
    pairs = related_pairs(vocab_size)
    drop = set(rng.choice(len(pairs), size=int(round(noise * len(pairs))), replace=False).tolist())
    table = ExternalPredicateTable("relate.tsv", 2, {p: 1.0 for k, p in enumerate(pairs) if k not in drop})
    half = vocab_size // 2
    out = []
    for _ in range(n):
        k = int(rng.integers(6, 13))
        ids = rng.choice(vocab_size, size=k, replace=False)
        para: list[str] = []
        cp: list[int] = []
        for i in ids:
            if rng.random() < 0.25:
                para.append(FILLERS[int(rng.integers(len(FILLERS)))])
            cp.append(len(para))
            para.append(f"w{i}")
        a_idx = int(rng.integers(k))
        target = int(ids[a_idx])
        key = f"r{target}" if target < half and rng.random() < 0.5 else f"w{target}"
        used = set(int(i) for i in ids)
        free = [i for i in range(vocab_size) if i not in used]
        extra = [f"w{free[int(i)]}" for i in rng.choice(len(free), size=int(rng.integers(1, 4)), replace=False)]
        words = extra + [key]
        order = rng.permutation(len(words))
        query = [QUERY_HEAD] + [words[o] for o in order]
        j_key = 1 + int(np.flatnonzero(order == len(words) - 1)[0])
        a = cp[a_idx]
        out.append(AlignmentExample(tuple(para), tuple(query), ((a, j_key),), tuple(cp),
                                    tuple(range(1, len(query))), (a, a)))
    return out, table


def gold_coverage(examples, table: ExternalPredicateTable) -> float:
    """Share of gold pairs whose surface forms are listed in the table."""
    hits = [table.degree((ex.paragraph[i], ex.query[j])) > 0 for ex in examples for i, j in ex.gold]
    return sum(hits) / len(hits)


def build_alignment_model(cfg: dict, batch: int = 1, lp: int = 2, lq: int = 2) -> ComputationGraph:
    """Encoder, attention ``att[i, j]`` over query words, start/end heads."""
    V, D = cfg["vocab"], cfg["emb_dim"]
    g = ComputationGraph()
    xp = g.input("xp", (batch, lp, V))
    xq = g.input("xq", (batch, lq, V))
    pbias = g.input("pbias", (batch, lp))
    qbias = g.input("qbias", (batch, 1, lq))
    emb = g.parameter("emb", (V, D))
    w_enc = g.parameter("enc.W", (D, D))
    w_att = g.parameter("att.W", (D, D))
    w_start = g.parameter("start.w", (3 * D, 1))
    w_end = g.parameter("end.w", (3 * D, 1))

    def encode(x):
        return g.add("tanh", [g.add("matmul", [g.add("matmul", [x, emb]), w_enc])])

    P, Q = encode(xp), encode(xq)
    scores = g.add("matmul", [g.add("matmul", [P, w_att]), g.add("transpose", [Q], axes=(0, 2, 1))])
    att = g.add("softmax", [g.add("add", [scores, qbias])], name="att", axis=2)
    U = g.add("matmul", [att, Q])
    feats = g.add("concat", [P, U, g.add("mul", [P, U])], axis=2)
    for name, w in (("start", w_start), ("end", w_end)):
        logit = g.add("reshape", [g.add("matmul", [feats, w])], shape=(batch, lp))
        g.add("softmax", [g.add("add", [logit, pbias])], name=name, axis=1)
    return g


def alignment_param_count(cfg: dict) -> int:
    V, D = cfg["vocab"], cfg["emb_dim"]
    return V * D + 2 * D * D + 2 * 3 * D


def span_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    ps, pe = pred[0], max(pred)
    gs, ge = gold
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if not overlap:
        return 0.0
    return 2.0 * overlap / ((pe - ps + 1) + (ge - gs + 1))


class AlignmentTask(Task):
    name = "align"
    metrics = ("span_f1", "span_acc", "align_f1")
    rule_sets = {"R1": ("R1",), "R2": ("R2",)}
    defaults = {
        "data_seed": 0, "n_train": 1000, "n_dev": 200, "n_test": 300, "noise": 0.0,
        "vocab_size": 80, "emb_dim": 12, "epochs": 20, "lr": 0.02, "batch_size": 16,
    }

    def config(self, **overrides) -> dict:
        cfg = super().config(**overrides)
        cfg["vocab"] = len(vocabulary(cfg["vocab_size"]))
        return cfg

    def splits(self, cfg: dict) -> Splits:
        n = cfg["n_train"] + cfg["n_dev"] + cfg["n_test"]
        data, table = gen_alignment(cfg["data_seed"], n, cfg["vocab_size"], cfg["noise"])
        a, b = cfg["n_train"], cfg["n_train"] + cfg["n_dev"]
        return Splits(data[:a], data[a:b], data[b:], {"relate.tsv": table})

    def batch(self, examples, cfg, tables=None) -> Batch:
        if not examples:
            raise EmptyDataset("empty batch")
        index = {w: i for i, w in enumerate(vocabulary(cfg["vocab_size"]))}
        lp = max(len(ex.paragraph) for ex in examples)
        lq = max(len(ex.query) for ex in examples)
        B = len(examples)
        pbias = np.full((B, lp), MASK_BIAS)
        qbias = np.full((B, 1, lq), MASK_BIAS)
        gs, ge = np.zeros((B, lp)), np.zeros((B, lp))
        contexts = []
        for b, ex in enumerate(examples):
            pbias[b, : len(ex.paragraph)] = 0.0
            qbias[b, 0, : len(ex.query)] = 0.0
            gs[b, ex.answer[0]] = 1.0
            ge[b, ex.answer[1]] = 1.0
            contexts.append(GroundingContext({"Cp": list(ex.cp), "Cq": list(ex.cq)}, dict(tables or {}),
                                             {"p": list(ex.paragraph), "q": list(ex.query)}, b))
        bindings = {
            "xp": one_hot([[index[w] for w in ex.paragraph] for ex in examples], lp, cfg["vocab"]),
            "xq": one_hot([[index[w] for w in ex.query] for ex in examples], lq, cfg["vocab"]),
            "pbias": pbias, "qbias": qbias, "gold_start": gs, "gold_end": ge,
        }
        return Batch(examples, bindings, contexts, {"batch": B, "lp": lp, "lq": lq})

    def build(self, cfg, dims) -> ComputationGraph:
        return build_alignment_model(cfg, dims["batch"], dims["lp"], dims["lq"])

    def add_loss(self, g, dims) -> int:
        shape = (dims["batch"], dims["lp"])
        scale = 1.0 / dims["batch"]
        ls = g.add("cross_entropy", [self.output(g, "start"), g.input("gold_start", shape)], scale=scale)
        le = g.add("cross_entropy", [self.output(g, "end"), g.input("gold_end", shape)], scale=scale)
        return g.add("add", [ls, le], name="loss")

    def predict(self, g, values, batch) -> list:
        ps, pe = values[self.output(g, "start")], values[self.output(g, "end")]
        att = values[self.output(g, "att")]
        out = []
        for b, ex in enumerate(batch.examples):
            s, e = int(ps[b].argmax()), int(pe[b].argmax())
            pairs = {(i, j) for i in ex.cp for j in ex.cq if att[b, i, j] >= 0.5}
            out.append(((s, max(s, e)), pairs))
        return out

    def score(self, preds, examples, metric="span_f1") -> float:
        if not examples:
            raise EmptyDataset("no examples to score")
        if metric == "span_f1":
            return float(np.mean([span_f1(p[0], ex.answer) for p, ex in zip(preds, examples)]))
        if metric == "span_acc":
            return float(np.mean([p[0] == ex.answer for p, ex in zip(preds, examples)]))
        if metric == "align_f1":
            tp = sum(len(p[1] & set(ex.gold)) for p, ex in zip(preds, examples))
            n_pred = sum(len(p[1]) for p in preds)
            n_gold = sum(len(ex.gold) for ex in examples)
            return 2.0 * tp / (n_pred + n_gold) if n_pred + n_gold else 1.0
        raise ValueError(f"metric {metric!r} is not defined for task {self.name!r}")
