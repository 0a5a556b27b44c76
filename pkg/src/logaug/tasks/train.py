"""Training cells, dev-fold model selection and low-data sweeps."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from ..augment import CompiledProgram, augment_pipeline, compile_program
from ..errors import EmptyDataset
from ..rules import RuleProgram
from ..runtime import Adam, backward, forward, init_params
from .base import Batch, Splits, Task, make_batches, rng_for, sample_fraction

CSV_COLUMNS = ("task", "fraction", "seed", "rules", "rho", "metric", "epochs", "wall_seconds")


@dataclass
class Prepared:
    batch: Batch
    graph: object
    loss: int


@dataclass
class CellResult:
    task: str
    fraction: float
    seed: int
    rules: str
    rho: str
    metric: float
    epochs: int
    wall_seconds: float
    params: dict = field(default_factory=dict, repr=False)
    history: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {"task": self.task, "fraction": f"{self.fraction:g}", "seed": str(self.seed), "rules": self.rules,
                "rho": self.rho, "metric": f"{self.metric:.6f}", "epochs": str(self.epochs),
                "wall_seconds": f"{self.wall_seconds:.2f}"}


def compile_for(program: RuleProgram | CompiledProgram | None, rho: float | None = None) -> CompiledProgram | None:
    """Compile a program, overriding the weight of its soft statements.

    ``rho == 0`` switches the rules off entirely.
    """
    if program is None or rho == 0:
        return None
    if isinstance(program, CompiledProgram):
        return program
    return compile_program(program, rho=rho)


def prepare(task: Task, cfg: dict, examples: Sequence, program: CompiledProgram | None, tables,
            batch_size: int, with_loss: bool = True) -> list[Prepared]:
    out = []
    for chunk in make_batches(list(examples), batch_size):
        b = task.batch(chunk, cfg, tables)
        g = task.build(cfg, b.dims)
        if program is not None:
            g = augment_pipeline(program, g, b.contexts)
        loss = task.add_loss(g, b.dims) if with_loss else -1
        out.append(Prepared(b, g, loss))
    return out


def _bindings(p: Prepared, params: dict) -> dict:
    return {**p.batch.bindings, **params}


def predict(task: Task, prepared: Iterable[Prepared], params: dict) -> tuple[list, list]:
    preds, examples = [], []
    for p in prepared:
        values, _ = forward(p.graph, _bindings(p, params))
        preds.extend(task.predict(p.graph, values, p.batch))
        examples.extend(p.batch.examples)
    return preds, examples


def evaluate(task: Task, cfg: dict, params: dict, examples: Sequence, metric: str | None = None,
             program: RuleProgram | CompiledProgram | None = None, tables=None) -> float:
    """Score a parameter set on a dataset, with rules applied at prediction time."""
    if not examples:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    metric = metric or task.metrics[0]
    if metric not in task.metrics:
        raise ValueError(f"metric {metric!r} is not defined for task {task.name!r}")
    prepared = prepare(task, cfg, examples, compile_for(program), tables, cfg["batch_size"])
    preds, exs = predict(task, prepared, params)
    return task.score(preds, exs, metric)


def train_cell(task: Task, cfg: dict, splits: Splits, fraction: float, seed: int,
               program: RuleProgram | None = None, rho: float | None = None, label: str = "none") -> CellResult:
    """Train on a fraction of the pool; keep the epoch with the best dev score."""
    start = time.perf_counter()
    compiled = compile_for(program, rho)
    train, dev = sample_fraction(splits.train_pool, splits.dev_pool, fraction, seed)
    bs = cfg["batch_size"]
    tr = prepare(task, cfg, train, compiled, splits.tables, bs)
    dv = prepare(task, cfg, dev, compiled, splits.tables, bs)
    params = init_params(tr[0].graph, seed)
    opt = Adam(cfg["lr"])
    metric = task.metrics[0]
    best, best_epoch, best_params = -np.inf, 0, params
    history = []
    for epoch in range(1, cfg["epochs"] + 1):
        order = rng_for(seed, 3, epoch).permutation(len(tr))
        for k in order:
            p = tr[k]
            values, tape = forward(p.graph, _bindings(p, params))
            params = opt.step(params, backward(tape, p.loss))
        preds, exs = predict(task, dv, params)
        score = task.score(preds, exs, metric)
        history.append(score)
        if score > best:
            best, best_epoch, best_params = score, epoch, params
    te = prepare(task, cfg, splits.test, compiled, splits.tables, bs)
    preds, exs = predict(task, te, best_params)
    test = task.score(preds, exs, metric)
    return CellResult(task.name, fraction, seed, label, rho_label(program is not None, rho), test, best_epoch,
                      time.perf_counter() - start, best_params, history)


@lru_cache(maxsize=8)
def _cached_splits(task_name: str, cfg_items: tuple) -> Splits:
    from . import get_task

    return get_task(task_name).splits(dict(cfg_items))


def run_cell(spec: tuple) -> dict:
    """Worker entry point: ``(task, cfg items, fraction, seed, rules label, rho)``."""
    from . import get_task, resolve_rules

    task_name, cfg_items, fraction, seed, label, rho = spec
    task = get_task(task_name)
    cfg = dict(cfg_items)
    splits = _cached_splits(task_name, cfg_items)
    program = resolve_rules(task, label)
    return train_cell(task, cfg, splits, fraction, seed, program, rho, label).row()


def cell_specs(task: Task, cfg: dict, fractions, seeds, rule_labels, rho_grid) -> list[tuple]:
    """Cartesian grid; the baseline runs once per fraction and seed."""
    items = tuple(sorted(cfg.items()))
    specs = []
    for fraction in fractions:
        for seed in seeds:
            specs.append((task.name, items, float(fraction), int(seed), "none", None))
            for label in rule_labels:
                if label == "none":
                    continue
                for rho in rho_grid or [None]:
                    specs.append((task.name, items, float(fraction), int(seed), label, rho))
    return specs


def cell_key(row: dict) -> tuple:
    return (row["task"], f"{float(row['fraction']):g}", str(row["seed"]), row["rules"], row["rho"])


def rho_label(has_rules: bool, rho: float | None) -> str:
    """``-`` for the baseline, ``file`` when each statement keeps its own weight."""
    if not has_rules:
        return "-"
    if rho is None:
        return "file"
    return rho if isinstance(rho, str) else f"{rho:g}"


def spec_key(spec: tuple) -> tuple:
    task, _, fraction, seed, label, rho = spec
    return (task, f"{fraction:g}", str(seed), label, rho_label(label != "none", rho))


def low_data_sweep(task: Task, cfg: dict, fractions, seeds, rule_labels=(), rho_grid=None,
                   workers: int = 1, done: Iterable[tuple] = ()) -> list[dict]:
    """Train every cell of the grid not already in ``done``; rows come back in grid order."""
    skip = set(done)
    specs = [s for s in cell_specs(task, cfg, fractions, seeds, rule_labels, rho_grid) if spec_key(s) not in skip]
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_cell, specs))
    return [run_cell(s) for s in specs]
