"""Synthetic analogs of the reading-comprehension, inference and chunking tasks."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..rules import RuleProgram, merge_programs, parse_program
from .alignment import AlignmentTask, build_alignment_model, gen_alignment
from .base import Splits, Task
from .nli import InferenceTask, build_inference_model, gen_inference
from .tagging import TaggingTask, build_tagger_model, gen_tagging

TASKS: dict[str, Task] = {t.name: t for t in (AlignmentTask(), TaggingTask(), InferenceTask())}
PROGRAM_NAMES = ("R1", "R2", "N1", "N2", "N3", "C1", "C2", "C3", "C4", "C5")


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def rule_source(name: str) -> str:
    return resources.files("logaug.programs").joinpath(f"{name}.rules").read_text(encoding="utf-8")


def rule_programs() -> dict[str, RuleProgram]:
    """Every shipped rule file, parsed."""
    return {name: parse_program(rule_source(name)) for name in PROGRAM_NAMES}


def rule_set(task: Task, label: str) -> RuleProgram:
    """Merged program for a named rule set of a task, e.g. ``C1:5``."""
    names = task.rule_sets.get(label, tuple(label.split(",")))
    return merge_programs(parse_program(rule_source(n)) for n in names)


def resolve_rules(task: Task, spec: str | None) -> RuleProgram | None:
    """Program for a ``--rules`` value: a rule-set label, shipped names or file paths.

    ``none`` (or nothing) means the baseline. Comma-separated entries are
    merged; an entry naming an existing file is read from disk.
    """
    if spec is None or spec == "none":
        return None
    if spec in task.rule_sets:
        return rule_set(task, spec)
    progs = []
    for part in spec.split(","):
        path = Path(part)
        if part in PROGRAM_NAMES:
            progs.append(parse_program(rule_source(part)))
        elif path.is_file():
            progs.append(parse_program(path.read_text(encoding="utf-8")))
        else:
            raise FileNotFoundError(f"no rule set or rule file named {part!r}")
    return merge_programs(progs)


__all__ = [
    "TASKS", "PROGRAM_NAMES", "Task", "Splits", "get_task", "resolve_rules", "rule_programs", "rule_set", "rule_source",
    "AlignmentTask", "TaggingTask", "InferenceTask",
    "build_alignment_model", "build_tagger_model", "build_inference_model",
    "gen_alignment", "gen_tagging", "gen_inference",
]
