"""``logaug check|train|eval|sweep``.

Exit codes: 0 success, 1 cyclic or ill-formed rules, 2 I/O or configuration
errors. Settings are layered: task defaults < ``--config`` JSON < flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augment import (
    ExternalPredicateTable,
    Grounder,
    GroundingContext,
    compile_program,
)
from .errors import AugmentError, ConfigError, LogAugError, RuleError, UnknownIndexSet, UnknownTable
from .graph import ComputationGraph
from .rules import HARD, DataBound, parse_program
from .runtime import load_checkpoint, save_checkpoint
from .tasks import PROGRAM_NAMES, get_task, resolve_rules, rule_source
from .tasks.base import sample_fraction
from .tasks.train import CSV_COLUMNS, cell_key, evaluate, low_data_sweep, train_cell

log = logging.getLogger("logaug")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _weights(text: str) -> list:
    return [HARD if v.strip() == HARD else float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("LOGAUG_OUT") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _settings(task, args) -> dict:
    """Task defaults, then the config file, then explicit flags."""
    overrides: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        overrides.update(json.loads(path.read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    for key in ("epochs", "lr", "batch_size"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    unknown = set(overrides) - set(task.defaults)
    if unknown:
        raise ConfigError(f"unknown settings for task {task.name!r}: {sorted(unknown)}")
    cfg = task.config(**overrides)
    if cfg["epochs"] < 1:
        raise ConfigError("epochs must be >= 1")
    return cfg


def _check_fraction(f: float) -> float:
    if not 0.0 < f <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {f:g}")
    return f


# -- check ---------------------------------------------------------------------


def _probe(task_name, graph_path, args):
    """Graph and one grounding context to validate rules against."""
    if graph_path:
        g = ComputationGraph.load(graph_path)
        sets = {}
        for item in args.index_set or []:
            name, _, n = item.partition("=")
            sets[name] = list(range(int(n)))
        return g, GroundingContext(sets, {}, {}, None)
    task = get_task(task_name)
    cfg = task.config()
    splits = task.splits(cfg)
    b = task.batch(splits.test[:1], cfg, splits.tables)
    return task.build(cfg, b.dims), b.contexts[0]


def _load_tables(program, directory: Path) -> dict[str, ExternalPredicateTable]:
    tables = {}
    for pred in program.predicates.values():
        b = pred.binding
        if isinstance(b, DataBound) and b.keys:
            path = directory / b.table
            if path.is_file():
                tables[b.table] = ExternalPredicateTable.load(path)
    return tables


def _normal_form(rule) -> str:
    ante = rule.ante
    joiner = " & " if ante.form == "conjunction" else " | "
    text = f"{rule.distance.form}[{joiner.join(str(lit) for lit in ante.literals)}] -> {rule.target}"
    if ante.aux_definitions:
        text += "  where " + "; ".join(
            f"{p.name} := {body.form}({', '.join(map(str, body.literals))})" for p, body in ante.aux_definitions
        )
    return text


def cmd_check(args) -> int:
    if not args.graph and not args.task:
        raise ConfigError("check needs --graph or --task")
    g, ctx = _probe(args.task, args.graph, args)
    status = EXIT_OK
    for name in args.rules:
        path = Path(name)
        if not path.is_file() and name in PROGRAM_NAMES:
            text = rule_source(name)
        else:
            text = path.read_text(encoding="utf-8")
        try:
            program = parse_program(text)
        except RuleError as exc:
            print(f"{path}: parse error: {exc}")
            status = EXIT_INVALID
            continue
        ctx.tables.update(_load_tables(program, Path(args.tables) if args.tables else path.parent))
        if args.graph:
            for _, iset in (q for st in program.statements for q in st.quantifiers):
                ctx.index_sets.setdefault(iset, list(range(args.probe_size)))
        compiled = compile_program(program)
        grounder = Grounder(compiled, g)
        print(f"{path}: parse OK, {len(program.statements)} statement(s)")
        for rule in compiled.rules:
            head = f"  line {rule.statement.line}"
            if rule.statement.name:
                head += f" [{rule.statement.name}]"
            try:
                n = len(grounder.ground_rule(rule, ctx))
            except (UnknownTable, UnknownIndexSet):
                raise
            except AugmentError as exc:
                print(f"{head}: {_normal_form(rule)}")
                witness = getattr(exc, "witness", None)
                if witness:
                    print(f"    Cyclic: {witness[0]} is upstream of {witness[1]}")
                else:
                    print(f"    invalid: {exc}")
                status = EXIT_INVALID
                continue
            except LogAugError as exc:
                print(f"{head}: {_normal_form(rule)}\n    invalid: {exc}")
                status = EXIT_INVALID
                continue
            print(f"{head}: {_normal_form(rule)}\n    grounded {n} on probe, Acyclic")
        for name, d in compiled.aux.items():
            st = d.statement
            if st is not None and st.kind == "biconditional" and st.consequent.predicate.name == name:
                print(f"  line {st.line}: auxiliary {name} := {d.distance.form}")
    return status


# -- train / eval ----------------------------------------------------------------


def _rules_spec(args) -> str:
    if not args.rules:
        return "none"
    return ",".join(args.rules)


def cmd_train(args) -> int:
    task = get_task(args.task)
    cfg = _settings(task, args)
    fraction = _check_fraction(args.fraction)
    spec = _rules_spec(args)
    program = resolve_rules(task, spec)
    rho = args.rho[0] if args.rho else None
    splits = task.splits(cfg)
    res = train_cell(task, cfg, splits, fraction, args.seed, program, rho, spec)
    out = _out_dir(args)
    stem = f"{task.name}_{spec.replace(',', '+').replace('/', '_').replace(':', '-')}_f{fraction:g}_s{args.seed}"
    if rho is not None:
        stem += f"_rho{rho}"
    meta = {"task": task.name, "config": cfg, "rules": spec, "rho": rho, "fraction": fraction, "seed": args.seed,
            "best_epoch": res.epochs}
    save_checkpoint(out / f"{stem}.npz", res.params, meta)
    row = res.row()
    with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    print(",".join(row[c] for c in CSV_COLUMNS))
    log.info("checkpoint written to %s", out / f"{stem}.npz")
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    params, meta = load_checkpoint(path)
    task = get_task(args.task or meta["task"])
    if task.name != meta["task"]:
        raise ConfigError(f"checkpoint was trained for task {meta['task']!r}")
    metric = args.metric or task.metrics[0]
    if metric not in task.metrics:
        raise ConfigError(f"metric {metric!r} is not defined for task {task.name!r}; choose from {task.metrics}")
    cfg = dict(meta["config"])
    spec = meta.get("rules", "none") if args.rules is None else _rules_spec(args)
    program = resolve_rules(task, spec)
    compiled = None
    if program is not None and meta.get("rho") != 0:
        compiled = compile_program(program, rho=meta.get("rho"))
    splits = task.splits(cfg)
    data = splits.test
    if args.split == "train":
        data, _ = sample_fraction(splits.train_pool, splits.dev_pool, meta["fraction"], meta["seed"])
    value = evaluate(task, cfg, params, data, metric, compiled, splits.tables)
    print(f"{metric}={value:.6f}")
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------


def _read_rows(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summary_table(rows: list[dict]) -> str:
    """Markdown table: one row per fraction, one column per rule set and weight."""
    cols: list[tuple[str, str]] = []
    cells: dict[tuple, list[float]] = {}
    fracs: list[str] = []
    for r in rows:
        col = (r["rules"], r["rho"])
        if col not in cols:
            cols.append(col)
        if r["fraction"] not in fracs:
            fracs.append(r["fraction"])
        cells.setdefault((r["fraction"], col), []).append(float(r["metric"]))
    fracs.sort(key=float)
    names = ["baseline" if c[0] == "none" else (f"+{c[0]}" if c[1] == "file" else f"+{c[0]} (rho={c[1]})") for c in cols]
    lines = ["| %Train | " + " | ".join(names) + " |", "|---" * (len(cols) + 1) + "|"]
    for f in fracs:
        vals = []
        for c in cols:
            v = cells.get((f, c))
            vals.append(f"{100 * float(np.mean(v)):.1f}" if v else "")
        lines.append(f"| {100 * float(f):g}% | " + " | ".join(vals) + " |")
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    task = get_task(args.task)
    cfg = _settings(task, args)
    fractions = [_check_fraction(f) for f in (args.fractions or [0.05, 0.1, 0.2])]
    seeds = args.seeds or [args.seed]
    labels = args.rules or list(task.rule_sets)[:1]
    for label in labels:
        resolve_rules(task, label)
    out = _out_dir(args)
    path = out / (args.csv or f"sweep_{task.name}.csv")
    existing = _read_rows(path)
    new = low_data_sweep(task, cfg, fractions, seeds, labels, args.rho, args.workers,
                         done=[cell_key(r) for r in existing])
    rows = existing + new
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)
    print(f"{len(new)} new cell(s), {len(rows)} total -> {path}")
    print(summary_table(rows))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="logaug", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, rho_help):
        p.add_argument("--task", choices=["align", "tag", "nli"], required=True)
        p.add_argument("--rules", nargs="+", help="rule-set labels, shipped names or .rules files; 'none' for baseline")
        p.add_argument("--rho", type=_weights, help=rho_help)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--config", help="JSON file of task settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one task setting")
        p.add_argument("--out", help="output directory (default $LOGAUG_OUT or ./runs)")

    p = sub.add_parser("check", help="validate rule files against a model graph")
    p.add_argument("--rules", nargs="+", required=True)
    p.add_argument("--graph", help="graph description JSON")
    p.add_argument("--task", choices=["align", "tag", "nli"], help="probe the task's model instead of a graph file")
    p.add_argument("--tables", help="directory holding data tables (default: next to each rule file)")
    p.add_argument("--index-set", action="append", metavar="NAME=SIZE")
    p.add_argument("--probe-size", type=int, default=3)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("train", help="train one cell and write a checkpoint")
    common(p, "rule weight overriding the files (first value used)")
    p.add_argument("--fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["align", "tag", "nli"])
    p.add_argument("--rules", nargs="+")
    p.add_argument("--metric")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="low-data grid over fractions, seeds, rule sets and weights")
    common(p, "comma-separated weight grid, e.g. 1,2,4,8,16")
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", help="results file name inside the output directory")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UnknownTable, UnknownIndexSet, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LogAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
