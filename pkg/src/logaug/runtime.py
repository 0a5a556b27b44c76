"""Reverse-mode execution of computation graphs, Adam, losses, checkpoints."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import MissingBinding, NonFiniteValue, NonScalarLoss, NotNormalized, ShapeMismatch
from .graph import ComputationGraph

PROB_FLOOR = 1e-12
NORM_TOL = 1e-6


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _cross_entropy(p, t, scale):
    mass = t.sum(axis=-1)
    live = mass > 0
    if live.any():
        sums = p.sum(axis=-1)[live]
        if np.abs(sums - 1.0).max() > NORM_TOL:
            raise NotNormalized(f"prediction rows sum to {sums.min():.8g}..{sums.max():.8g}")
    return -scale * float((t * np.log(np.maximum(p, PROB_FLOOR))).sum())


def _fwd(op: str, xs: list[np.ndarray], a: Mapping) -> np.ndarray:
    if op == "add":
        return xs[0] + xs[1]
    if op == "sub":
        return xs[0] - xs[1]
    if op == "mul":
        return xs[0] * xs[1]
    if op == "matmul":
        return np.matmul(xs[0], xs[1])
    if op == "affine":
        return xs[0] * a.get("scale", 1.0) + a.get("shift", 0.0)
    if op == "clamp_min":
        return np.maximum(xs[0], a["lo"])
    if op == "clamp_max":
        return np.minimum(xs[0], a["hi"])
    if op == "sum":
        return np.asarray(xs[0].sum(axis=a.get("axis"), keepdims=bool(a.get("keepdims"))))
    if op == "softmax":
        return _softmax(xs[0], a.get("axis", -1))
    if op == "sigmoid":
        return _sigmoid(xs[0])
    if op == "tanh":
        return np.tanh(xs[0])
    if op == "relu":
        return np.maximum(xs[0], 0.0)
    if op == "stopgrad":
        return xs[0]
    if op == "range":
        return np.asarray(xs[0].max() - xs[0].min()) if xs[0].size else np.asarray(0.0)
    if op == "concat":
        return np.concatenate(xs, axis=a.get("axis", 0))
    if op == "slice":
        sl = [slice(None)] * xs[0].ndim
        sl[a["axis"]] = slice(a["start"], a["stop"])
        return xs[0][tuple(sl)]
    if op == "select":
        return np.take(xs[0], a["index"], axis=a["axis"])
    if op == "reshape":
        return xs[0].reshape(a["shape"])
    if op == "transpose":
        return np.transpose(xs[0], a["axes"])
    if op == "gather":
        return xs[0].reshape(-1)[a["indices"]]
    if op == "scatter":
        out = np.zeros(int(np.prod(a["shape"])))
        np.add.at(out, a["indices"], xs[0])
        return out.reshape(a["shape"])
    if op == "cross_entropy":
        return np.asarray(_cross_entropy(xs[0], xs[1], a.get("scale", 1.0)))
    raise ShapeMismatch(f"no kernel for op {op!r}")


def _bwd(op: str, g: np.ndarray, xs: list[np.ndarray], out: np.ndarray, a: Mapping) -> list:
    """Gradients with respect to each input (``None`` where none flows)."""
    if op == "add":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    if op == "sub":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]
    if op == "mul":
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]
    if op == "matmul":
        x, w = xs
        gx = np.matmul(g, np.swapaxes(w, -1, -2))
        gw = np.matmul(np.swapaxes(x, -1, -2), g)
        return [_unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)]
    if op == "affine":
        return [g * a.get("scale", 1.0)]
    # kinks: the clamp passes no gradient where input == bound
    if op == "clamp_min":
        return [g * (xs[0] > a["lo"])]
    if op == "clamp_max":
        return [g * (xs[0] < a["hi"])]
    if op == "sum":
        axis = a.get("axis")
        if axis is not None and not a.get("keepdims"):
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, xs[0].shape).copy()]
    if op == "softmax":
        axis = a.get("axis", -1)
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]
    if op == "sigmoid":
        return [g * out * (1.0 - out)]
    if op == "tanh":
        return [g * (1.0 - out * out)]
    if op == "relu":
        return [g * (xs[0] > 0)]
    if op in ("stopgrad", "range"):
        return [None]
    if op == "concat":
        axis = a.get("axis", 0)
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return list(np.split(g, cuts, axis=axis))
    if op == "slice":
        gx = np.zeros_like(xs[0])
        sl = [slice(None)] * gx.ndim
        sl[a["axis"]] = slice(a["start"], a["stop"])
        gx[tuple(sl)] = g
        return [gx]
    if op == "select":
        gx = np.zeros_like(xs[0])
        sl = [slice(None)] * gx.ndim
        sl[a["axis"]] = a["index"]
        gx[tuple(sl)] = g
        return [gx]
    if op == "reshape":
        return [g.reshape(xs[0].shape)]
    if op == "transpose":
        return [np.transpose(g, np.argsort(a["axes"]))]
    if op == "gather":
        gx = np.zeros(xs[0].size)
        np.add.at(gx, a["indices"], g)
        return [gx.reshape(xs[0].shape)]
    if op == "scatter":
        return [g.reshape(-1)[a["indices"]]]
    if op == "cross_entropy":
        p, t = xs
        safe = np.maximum(p, PROB_FLOOR)
        gp = -a.get("scale", 1.0) * float(g) * t / safe * (p > PROB_FLOOR)
        return [gp, None]
    raise ShapeMismatch(f"no gradient for op {op!r}")


@dataclass
class ExecutionTape:
    graph: ComputationGraph
    values: list[np.ndarray]
    order: list[int] = field(default_factory=list)


def forward(
    g: ComputationGraph,
    bindings: Mapping[str, np.ndarray],
    overrides: Mapping[int, np.ndarray] | None = None,
) -> tuple[list[np.ndarray], ExecutionTape]:
    """Evaluate every node once, in insertion (topological) order.

    ``overrides`` pins the value of chosen nodes; gradient checks use it to
    freeze stop-gradient nodes at their unperturbed values.
    """
    values: list[np.ndarray] = [None] * len(g.nodes)  # type: ignore[list-item]
    overrides = overrides or {}
    for nid, node in enumerate(g.nodes):
        if nid in overrides:
            out = np.asarray(overrides[nid], dtype=float)
        elif node.op in ("input", "parameter"):
            if node.name not in bindings:
                raise MissingBinding(node.name)
            out = np.asarray(bindings[node.name], dtype=float)
            if out.shape != node.shape:
                raise ShapeMismatch(f"{node.name!r}: bound shape {out.shape}, declared {node.shape}")
        elif node.op == "constant":
            out = node.attrs["value"]
        else:
            out = _fwd(node.op, [values[i] for i in node.inputs], node.attrs)
            if not np.isfinite(out).all():
                raise NonFiniteValue(nid, node.op)
        values[nid] = out
    return values, ExecutionTape(g, values, list(range(len(g.nodes))))


def backward(tape: ExecutionTape, loss_node: int, return_all: bool = False):
    """Gradients of a scalar node with respect to every parameter."""
    g = tape.graph
    if tape.values[loss_node].shape != ():
        raise NonScalarLoss(f"loss node {loss_node} has shape {tape.values[loss_node].shape}")
    grads: list[np.ndarray | None] = [None] * len(g.nodes)
    grads[loss_node] = np.asarray(1.0)
    for nid in reversed(tape.order[: loss_node + 1]):
        gout = grads[nid]
        node = g.nodes[nid]
        if gout is None or not node.inputs:
            continue
        xs = [tape.values[i] for i in node.inputs]
        for i, gi in zip(node.inputs, _bwd(node.op, gout, xs, tape.values[nid], node.attrs)):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
    out = {}
    for nid, node in enumerate(g.nodes):
        if node.op == "parameter":
            gp = grads[nid]
            out[node.name] = np.zeros(node.shape) if gp is None else np.asarray(gp, dtype=float).reshape(node.shape)
    if return_all:
        return out, grads
    return out


# -- parameters ---------------------------------------------------------------


def _rng_for(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(ss))


def init_params(g: ComputationGraph, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero vectors; each stream keyed by parameter name."""
    params = {}
    for name, shape in g.parameters().items():
        if len(shape) >= 2:
            limit = np.sqrt(6.0 / (shape[-2] + shape[-1]))
            params[name] = _rng_for(seed, name).uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = dict(params)
        for name, p in params.items():
            gr = grads.get(name)
            if gr is None:
                continue
            if gr.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name!r} has shape {gr.shape}, parameter {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            out[name] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def cross_entropy(p, gold: int) -> float:
    """``-log p[gold]`` with the probability floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    if abs(p.sum() - 1.0) > NORM_TOL:
        raise NotNormalized(f"distribution sums to {p.sum():.8g}")
    return float(-np.log(max(p[gold], PROB_FLOOR)))


def span_loss(p_start, p_end, start: int, end: int) -> float:
    return cross_entropy(p_start, start) + cross_entropy(p_end, end)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "logaug-checkpoint-1"


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    payload = {f"p:{k}": np.asarray(v) for k, v in params.items()}
    header = {"format": CHECKPOINT_FORMAT, **(meta or {})}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p:")}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    return params, meta
