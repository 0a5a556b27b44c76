"""Pieces shared by the synthetic tasks: splits, batching and graph helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..augment import ExternalPredicateTable, GroundingContext
from ..errors import EmptyDataset
from ..graph import ComputationGraph

MASK_BIAS = -30.0
MIN_DEV = 40


def rng_for(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([k & 0xFFFFFFFF for k in key])))


@dataclass
class Splits:
    train_pool: list
    dev_pool: list
    test: list
    tables: dict[str, ExternalPredicateTable] = field(default_factory=dict)


@dataclass
class Batch:
    examples: list
    bindings: dict[str, np.ndarray]
    contexts: list[GroundingContext]
    dims: dict[str, int]


def sample_fraction(pool: Sequence, dev_pool: Sequence, fraction: float, seed: int):
    """Draw ``fraction`` of the pool and split it 9/1 into train and dev.

    Tiny dev folds make epoch selection a coin flip, so the dev fold is
    topped up from a held-out pool to at least ``MIN_DEV`` examples.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = rng_for(seed, 1)
    n = max(2, math.ceil(fraction * len(pool)))
    picked = [pool[i] for i in rng.permutation(len(pool))[:n]]
    n_dev = max(1, n // 10)
    train, dev = picked[n_dev:], picked[:n_dev]
    if len(dev) < MIN_DEV:
        dev = dev + list(dev_pool[: MIN_DEV - len(dev)])
    return train, dev


def make_batches(examples: Sequence, size: int) -> list[list]:
    if not examples:
        raise EmptyDataset("no examples")
    return [list(examples[i : i + size]) for i in range(0, len(examples), size)]


def one_hot(ids: Sequence[Sequence[int]], length: int, vocab: int) -> np.ndarray:
    out = np.zeros((len(ids), length, vocab))
    for b, row in enumerate(ids):
        for t, k in enumerate(row):
            out[b, t, k] = 1.0
    return out


def mask_bias(lengths: Sequence[int], length: int) -> np.ndarray:
    out = np.full((len(lengths), length), MASK_BIAS)
    for b, n in enumerate(lengths):
        out[b, :n] = 0.0
    return out


def linear(g: ComputationGraph, x: int, w: int, b: int | None = None) -> int:
    h = g.add("matmul", [x, w])
    return h if b is None else g.add("add", [h, b])


class Task:
    """Interface every synthetic task implements."""

    name: str = ""
    metrics: tuple[str, ...] = ()
    rule_sets: dict[str, tuple[str, ...]] = {}
    defaults: dict[str, Any] = {}

    def config(self, **overrides) -> dict:
        cfg = dict(self.defaults)
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def splits(self, cfg: dict) -> Splits:
        raise NotImplementedError

    def batch(self, examples: list, cfg: dict, tables) -> Batch:
        raise NotImplementedError

    def build(self, cfg: dict, dims: dict) -> ComputationGraph:
        raise NotImplementedError

    def add_loss(self, g: ComputationGraph, dims: dict) -> int:
        raise NotImplementedError

    def predict(self, g: ComputationGraph, values: list, batch: Batch) -> list:
        raise NotImplementedError

    def score(self, preds: list, examples: list, metric: str) -> float:
        raise NotImplementedError

    def output(self, g: ComputationGraph, base: str) -> int:
        """Constrained version of a named output, or the output itself."""
        return g.resolve(base + "'")
