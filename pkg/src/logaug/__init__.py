"""Compile first-order rules into Łukasiewicz distance nodes that augment a
computation graph, plus a small reverse-mode runtime to train the result."""

from .augment import (
    AuxiliaryLayerSpec,
    ExternalPredicateTable,
    GroundedConstraint,
    GroundingContext,
    apply_auxiliary,
    apply_constraints,
    augment_pipeline,
    compile_program,
    ground,
)
from .graph import Acyclic, ComputationGraph, Cyclic, check_cyclicity, is_upstream
from .rules import HARD, contrapositive, decompose_consequent, normalize_antecedent, parse_program, parse_rules
from .runtime import Adam, backward, forward, init_params
from .softlogic import DistanceExpr, compile_distance, eval_distance, ideal_distance

__version__ = "0.1.0"

__all__ = [
    "HARD", "Acyclic", "Adam", "AuxiliaryLayerSpec", "ComputationGraph", "Cyclic", "DistanceExpr",
    "ExternalPredicateTable", "GroundedConstraint", "GroundingContext", "apply_auxiliary", "apply_constraints",
    "augment_pipeline", "backward", "check_cyclicity", "compile_distance", "compile_program", "contrapositive",
    "decompose_consequent", "eval_distance", "forward", "ground", "ideal_distance", "init_params", "is_upstream",
    "normalize_antecedent", "parse_program", "parse_rules",
]
