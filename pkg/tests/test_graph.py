import json
import random

import numpy as np
import pytest

from logaug.errors import DuplicateName, GraphCycle, ShapeMismatch, UnknownNeuronName, UnknownNode
from logaug.graph import (
    Acyclic,
    ComputationGraph,
    Cyclic,
    check_cyclicity,
    infer_shape,
    is_upstream,
    topological_order,
)


def two_layer_graph():
    """a-layer feeds the b-layer: a_k = sigma(W x), b_k = sigma(V a)."""
    g = ComputationGraph()
    x = g.input("x", (1, 2))
    w = g.parameter("W", (2, 2))
    v = g.parameter("V", (2, 2))
    s = g.add("matmul", [x, w])
    a1 = g.add("sigmoid", [g.add("select", [s], axis=1, index=0)], name="a1")
    a2 = g.add("sigmoid", [g.add("select", [s], axis=1, index=1)], name="a2")
    av = g.add("concat", [g.add("reshape", [a1], shape=(1, 1)), g.add("reshape", [a2], shape=(1, 1))], axis=1)
    t = g.add("matmul", [av, v])
    g.add("sigmoid", [g.add("select", [t], axis=1, index=0)], name="b1")
    g.add("sigmoid", [g.add("select", [t], axis=1, index=1)], name="b2")
    return g


def test_two_layer_verdicts():
    g = two_layer_graph()
    assert is_upstream(g, g.lookup("a1"), g.lookup("b2"))
    verdict = check_cyclicity(g, ["a1", "b1"], ["a2'", "b2'"])
    assert isinstance(verdict, Cyclic)
    r, l = verdict.witness
    assert l == "b1" and r == "a2'"
    assert isinstance(check_cyclicity(g, ["a1", "a2"], ["b1'", "b2'"]), Acyclic)


def test_self_reference_conventions():
    g = two_layer_graph()
    assert check_cyclicity(g, ["a1"], ["a1"])
    assert check_cyclicity(g, ["a1'"], ["a1'"])
    assert not check_cyclicity(g, ["a1"], ["a1'"])


def test_names_and_errors():
    g = ComputationGraph()
    x = g.input("x", (3,))
    with pytest.raises(DuplicateName):
        g.input("x", (3,))
    with pytest.raises(UnknownNode):
        g.add("tanh", [5])
    with pytest.raises(UnknownNeuronName):
        g.lookup("nope")
    with pytest.raises(ShapeMismatch):
        g.add("matmul", [x, g.parameter("W", (4, 2))])
    assert g.resolve("x'") == x


@pytest.mark.parametrize(
    "op, shapes, attrs, want",
    [
        ("matmul", [(5, 3, 4), (4, 2)], {}, (5, 3, 2)),
        ("add", [(5, 3), (3,)], {}, (5, 3)),
        ("sum", [(5, 3)], {"axis": 1}, (5,)),
        ("sum", [(5, 3)], {"axis": 1, "keepdims": True}, (5, 1)),
        ("concat", [(2, 3), (2, 4)], {"axis": 1}, (2, 7)),
        ("select", [(2, 3, 4)], {"axis": 1, "index": 0}, (2, 4)),
        ("transpose", [(2, 3, 4)], {"axes": (0, 2, 1)}, (2, 4, 3)),
        ("gather", [(2, 3)], {"indices": np.array([0, 5, 5])}, (3,)),
        ("scatter", [(3,)], {"shape": (2, 2), "indices": np.array([0, 3, 3])}, (2, 2)),
        ("range", [(4, 4)], {}, ()),
    ],
)
def test_shape_inference(op, shapes, attrs, want):
    assert infer_shape(op, shapes, attrs) == want


def test_serialization_round_trip_any_order(tmp_path):
    g = two_layer_graph()
    g.add("clamp_min", [g.lookup("b1")], lo=0.25)
    data = g.to_dict()
    json.dumps(data)
    data["nodes"] = list(reversed(data["nodes"]))
    back = ComputationGraph.from_dict(data)
    assert set(back.name_index) == set(g.name_index)
    for name in g.name_index:
        assert back.node(back.lookup(name)).shape == g.node(g.lookup(name)).shape
    g.save(tmp_path / "g.json")
    again = ComputationGraph.load(tmp_path / "g.json")
    assert [n.op for n in again.nodes] == [n.op for n in g.nodes]


def test_cyclic_node_list_is_rejected():
    data = {"format": "logaug-graph-1", "nodes": [
        {"id": 0, "op": "tanh", "inputs": [1]},
        {"id": 1, "op": "tanh", "inputs": [0]},
    ]}
    with pytest.raises(GraphCycle):
        ComputationGraph.from_dict(data)


def random_dag(rng, n):
    g = ComputationGraph()
    g.input("n0", (1,))
    for k in range(1, n):
        fan = rng.sample(range(k), min(k, rng.randint(1, 3)))
        if len(fan) == 1:
            g.add("tanh", fan, name=f"n{k}")
        else:
            node = fan[0]
            for other in fan[1:]:
                node = g.add("add", [node, other])
            g.add("tanh", [node], name=f"n{k}")
    return g


def closure(g):
    reach = [set() for _ in g.nodes]
    for nid in reversed(topological_order(g)):
        for c in g.consumers(nid):
            reach[nid] |= {c} | reach[c]
    return reach


def test_upstream_matches_closure_small():
    rng = random.Random(3)
    for _ in range(30):
        g = random_dag(rng, rng.randint(2, 15))
        reach = closure(g)
        for a in range(len(g.nodes)):
            for b in range(len(g.nodes)):
                assert is_upstream(g, a, b) == (b in reach[a])


def test_topological_order_respects_edges():
    g = random_dag(random.Random(9), 30)
    pos = {n: i for i, n in enumerate(topological_order(g))}
    for nid, node in enumerate(g.nodes):
        assert all(pos[i] < pos[nid] for i in node.inputs)
