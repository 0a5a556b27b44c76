"""Computation-graph IR: tensor-valued nodes, named neurons, reachability.

Nodes are appended in topological order, so the graph is acyclic at every
observable moment. A node name may carry a trailing ``'`` to denote the
constrained version of a neuron; ``att'`` refers to ``att`` after
augmentation, or to ``att`` itself while it is unconstrained.
"""

from __future__ import annotations

import heapq
import json
import threading
from dataclasses import dataclass, field
from math import prod
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateName, GraphCycle, ShapeMismatch, UnknownNeuronName, UnknownNode

ACTIVATIONS = frozenset({"softmax", "sigmoid", "tanh", "relu"})
LEAF_OPS = frozenset({"input", "parameter", "constant"})

Shape = tuple[int, ...]


@dataclass(frozen=True)
class NodeRecord:
    op: str
    inputs: tuple[int, ...]
    shape: Shape
    name: str | None = None
    attrs: Mapping[str, Any] = field(default_factory=dict)
    labels: Mapping[int, tuple[str, ...]] = field(default_factory=dict)


def split_name(name: str) -> tuple[str, bool]:
    """``"att'"`` -> ``("att", True)``."""
    if name.endswith("'"):
        return name[:-1], True
    return name, False


def _broadcast(op: str, shapes: Sequence[Shape]) -> Shape:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {list(shapes)}") from None


def _matmul_shape(a: Shape, b: Shape) -> Shape:
    if len(a) < 2 or len(b) < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a} @ {b}")
    batch = _broadcast("matmul", [a[:-2], b[:-2]])
    return batch + (a[-2], b[-1])


def _axis(axis: int, rank: int, op: str) -> int:
    if not -rank <= axis < rank:
        raise ShapeMismatch(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def infer_shape(op: str, shapes: Sequence[Shape], attrs: Mapping[str, Any]) -> Shape:
    """Output shape of ``op`` applied to inputs of the given shapes."""
    arity = {
        "input": 0, "parameter": 0, "constant": 0,
        "add": 2, "sub": 2, "mul": 2, "matmul": 2, "cross_entropy": 2,
    }
    n = arity.get(op)
    if n is None and op not in ("concat",):
        n = 1
    if n is not None and len(shapes) != n:
        raise ShapeMismatch(f"{op} takes {n} input(s), got {len(shapes)}")

    if op in ("input", "parameter"):
        return tuple(int(d) for d in attrs["shape"])
    if op == "constant":
        return tuple(np.shape(attrs["value"]))
    if op in ("add", "sub", "mul"):
        return _broadcast(op, shapes)
    if op == "matmul":
        return _matmul_shape(*shapes)
    (x,) = shapes[:1] if shapes else ((),)
    if op == "affine":
        for k in ("scale", "shift"):
            b = np.asarray(attrs.get(k, 0.0))
            if _broadcast(op, [x, b.shape]) != x:
                raise ShapeMismatch(f"affine: {k} of shape {b.shape} does not fit {x}")
        return x
    if op in ACTIVATIONS or op == "stopgrad":
        if op == "softmax":
            if not x:
                raise ShapeMismatch("softmax of a scalar")
            _axis(attrs.get("axis", -1), len(x), op)
        return x
    if op in ("clamp_min", "clamp_max"):
        bound = np.asarray(attrs["lo" if op == "clamp_min" else "hi"])
        if _broadcast(op, [x, bound.shape]) != x:
            raise ShapeMismatch(f"{op}: bound of shape {bound.shape} does not fit {x}")
        return x
    if op == "sum":
        axis = attrs.get("axis")
        if axis is None:
            return ()
        ax = _axis(axis, len(x), op)
        if attrs.get("keepdims"):
            return x[:ax] + (1,) + x[ax + 1:]
        return x[:ax] + x[ax + 1:]
    if op == "concat":
        if not shapes:
            raise ShapeMismatch("concat of nothing")
        ax = _axis(attrs.get("axis", 0), len(shapes[0]), op)
        for s in shapes[1:]:
            if len(s) != len(shapes[0]) or s[:ax] + s[ax + 1:] != shapes[0][:ax] + shapes[0][ax + 1:]:
                raise ShapeMismatch(f"concat: incompatible shapes {list(shapes)}")
        return shapes[0][:ax] + (sum(s[ax] for s in shapes),) + shapes[0][ax + 1:]
    if op == "slice":
        ax = _axis(attrs["axis"], len(x), op)
        start, stop = attrs["start"], attrs["stop"]
        if not 0 <= start <= stop <= x[ax]:
            raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis of size {x[ax]}")
        return x[:ax] + (stop - start,) + x[ax + 1:]
    if op == "select":
        ax = _axis(attrs["axis"], len(x), op)
        if not 0 <= attrs["index"] < x[ax]:
            raise ShapeMismatch(f"select index {attrs['index']} out of range for axis of size {x[ax]}")
        return x[:ax] + x[ax + 1:]
    if op == "reshape":
        new = tuple(int(d) for d in attrs["shape"])
        if prod(new) != prod(x):
            raise ShapeMismatch(f"cannot reshape {x} to {new}")
        return new
    if op == "transpose":
        axes = tuple(attrs["axes"])
        if sorted(axes) != list(range(len(x))):
            raise ShapeMismatch(f"transpose axes {axes} do not match rank {len(x)}")
        return tuple(x[a] for a in axes)
    if op == "gather":
        idx = np.asarray(attrs["indices"])
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= prod(x))):
            raise ShapeMismatch(f"gather indices out of range for shape {x}")
        return (idx.size,)
    if op == "scatter":
        idx = np.asarray(attrs["indices"])
        out = tuple(int(d) for d in attrs["shape"])
        if x != (idx.size,):
            raise ShapeMismatch(f"scatter: {idx.size} indices for input of shape {x}")
        if idx.size and (idx.min() < 0 or idx.max() >= prod(out)):
            raise ShapeMismatch(f"scatter indices out of range for shape {out}")
        return out
    if op == "range":
        return ()
    if op == "cross_entropy":
        if shapes[0] != shapes[1]:
            raise ShapeMismatch(f"cross_entropy: prediction {shapes[0]} vs target {shapes[1]}")
        return ()
    raise ShapeMismatch(f"unknown op {op!r}")


class ComputationGraph:
    """Append-only DAG of tensor operations with a neuron name index."""

    def __init__(self) -> None:
        self.nodes: list[NodeRecord] = []
        self.name_index: dict[str, int] = {}
        self._consumers: list[list[int]] = []
        self._reach: dict[int, frozenset[int]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.nodes)

    # -- construction --------------------------------------------------------

    def add(
        self,
        op: str,
        inputs: Iterable[int] = (),
        *,
        name: str | None = None,
        labels: Mapping[int, Sequence[str]] | None = None,
        **attrs: Any,
    ) -> int:
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise UnknownNode(i)
        if name is not None and name in self.name_index:
            raise DuplicateName(name)
        shape = infer_shape(op, [self.nodes[i].shape for i in inputs], attrs)
        nid = len(self.nodes)
        labels = {int(k): tuple(v) for k, v in (labels or {}).items()}
        self.nodes.append(NodeRecord(op, inputs, shape, name, attrs, labels))
        self._consumers.append([])
        for i in inputs:
            self._consumers[i].append(nid)
        if name is not None:
            self.name_index[name] = nid
        with self._lock:
            self._reach.clear()
        return nid

    def input(self, name: str, shape: Sequence[int]) -> int:
        return self.add("input", name=name, shape=tuple(shape))

    def parameter(self, name: str, shape: Sequence[int]) -> int:
        return self.add("parameter", name=name, shape=tuple(shape))

    def constant(self, value, name: str | None = None) -> int:
        return self.add("constant", name=name, value=np.asarray(value, dtype=float))

    def copy(self) -> "ComputationGraph":
        g = ComputationGraph()
        g.nodes = list(self.nodes)
        g.name_index = dict(self.name_index)
        g._consumers = [list(c) for c in self._consumers]
        return g

    # -- queries -------------------------------------------------------------

    def node(self, nid: int) -> NodeRecord:
        if not 0 <= nid < len(self.nodes):
            raise UnknownNode(nid)
        return self.nodes[nid]

    def consumers(self, nid: int) -> list[int]:
        self.node(nid)
        return list(self._consumers[nid])

    def lookup(self, name: str) -> int:
        try:
            return self.name_index[name]
        except KeyError:
            raise UnknownNeuronName(name) from None

    def resolve(self, name: str) -> int:
        """Node for ``name``; a primed name falls back to the unconstrained node."""
        if name in self.name_index:
            return self.name_index[name]
        base, _ = split_name(name)
        return self.lookup(base)

    def parameters(self) -> dict[str, Shape]:
        return {n.name: n.shape for n in self.nodes if n.op == "parameter"}

    def parameter_count(self) -> int:
        return sum(prod(s) for s in self.parameters().values())

    def descendants(self, nid: int) -> frozenset[int]:
        """All nodes reachable from ``nid`` by a path of length >= 1."""
        self.node(nid)
        with self._lock:
            hit = self._reach.get(nid)
        if hit is not None:
            return hit
        seen: set[int] = set()
        stack = list(self._consumers[nid])
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self._consumers[n])
        out = frozenset(seen)
        with self._lock:
            self._reach[nid] = out
        return out

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out = []
        for i, n in enumerate(self.nodes):
            rec: dict[str, Any] = {"id": i, "op": n.op, "inputs": list(n.inputs), "shape": list(n.shape)}
            if n.name is not None:
                rec["name"] = n.name
            attrs = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in n.attrs.items()
                     if not (k == "shape" and n.op in ("input", "parameter"))}
            if attrs:
                rec["attrs"] = attrs
            if n.labels:
                rec["labels"] = {str(k): list(v) for k, v in n.labels.items()}
            out.append(rec)
        return {"format": "logaug-graph-1", "nodes": out}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ComputationGraph":
        """Build a graph from a node list; nodes may be listed in any order."""
        recs = {int(r["id"]): r for r in data["nodes"]}
        edges = {nid: [int(i) for i in r.get("inputs", [])] for nid, r in recs.items()}
        for nid, ins in edges.items():
            for i in ins:
                if i not in recs:
                    raise UnknownNode(i)
        order = _kahn(sorted(recs), edges)
        g = cls()
        remap: dict[int, int] = {}
        for old in order:
            r = recs[old]
            attrs = dict(r.get("attrs", {}))
            if r["op"] in ("input", "parameter"):
                attrs["shape"] = tuple(r["shape"])
            if r["op"] == "constant":
                attrs["value"] = np.asarray(attrs.get("value", np.zeros(r["shape"])), dtype=float)
            for k in ("lo", "hi", "scale", "shift"):
                if isinstance(attrs.get(k), list):
                    attrs[k] = np.asarray(attrs[k], dtype=float)
            for k in ("indices",):
                if k in attrs:
                    attrs[k] = np.asarray(attrs[k], dtype=np.int64)
            labels = {int(k): v for k, v in r.get("labels", {}).items()}
            nid = g.add(r["op"], [remap[i] for i in edges[old]], name=r.get("name"), labels=labels, **attrs)
            if "shape" in r and tuple(r["shape"]) != g.nodes[nid].shape:
                raise ShapeMismatch(f"node {old}: declared shape {tuple(r['shape'])}, inferred {g.nodes[nid].shape}")
            remap[old] = nid
        return g

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ComputationGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _kahn(ids: Sequence[int], inputs: Mapping[int, Sequence[int]]) -> list[int]:
    indeg = {i: len(set(inputs[i])) for i in ids}
    out_edges: dict[int, list[int]] = {i: [] for i in ids}
    for i in ids:
        for j in set(inputs[i]):
            out_edges[j].append(i)
    heap = [i for i in ids if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in out_edges[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(order) != len(ids):
        raise GraphCycle("node list contains a cycle")
    return order


def topological_order(g: ComputationGraph) -> list[int]:
    """Inputs-first order, ties broken by smallest node id."""
    ids = range(len(g.nodes))
    return _kahn(list(ids), {i: g.nodes[i].inputs for i in ids})


def is_upstream(g: ComputationGraph, a: int, b: int) -> bool:
    """True iff a directed path of length >= 1 leads from ``a`` to ``b``."""
    g.node(b)
    return b in g.descendants(a)


@dataclass(frozen=True)
class Acyclic:
    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class Cyclic:
    witness: tuple[str, str]

    def __bool__(self) -> bool:
        return True


def check_cyclicity(g: ComputationGraph, antecedent: Iterable[str], consequent: Iterable[str]) -> Acyclic | Cyclic:
    """Decide whether compiling ``L -> R`` over these neurons would close a cycle.

    A consequent neuron that is upstream of an antecedent neuron makes the
    statement cyclic. The same neuron on both sides is cyclic too, unless
    the antecedent reads the unconstrained value and the consequent names
    the constrained one (``Y(t) -> Y'(t+1)``).
    """
    ante = [(n, *split_name(n)) for n in antecedent]
    for r_name in consequent:
        r_base, r_primed = split_name(r_name)
        rid = g.lookup(r_base)
        for l_name, l_base, l_primed in ante:
            lid = g.lookup(l_base)
            if lid == rid:
                if l_primed or not r_primed:
                    return Cyclic((r_name, l_name))
            elif is_upstream(g, rid, lid):
                return Cyclic((r_name, l_name))
    return Acyclic()
