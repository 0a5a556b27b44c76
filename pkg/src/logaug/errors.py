"""Exception hierarchy shared by every stage of the compiler and runtime."""

from __future__ import annotations


class LogAugError(Exception):
    """Base class for all errors raised by logaug."""


# -- rule language -----------------------------------------------------------


class RuleError(LogAugError):
    pass


class RuleSyntaxError(RuleError):
    def __init__(self, line: int, col: int, expected: str, got: str = ""):
        self.line, self.col, self.expected, self.got = line, col, expected, got
        msg = f"line {line}, col {col}: expected {expected}"
        if got:
            msg += f", got {got!r}"
        super().__init__(msg)


class UnknownPredicate(RuleError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown predicate {name!r}")


class ArityMismatch(RuleError):
    def __init__(self, name: str, expected: int, got: int):
        self.name, self.expected, self.got = name, expected, got
        super().__init__(f"predicate {name!r} takes {expected} argument(s), got {got}")


class UnboundVariable(RuleError):
    def __init__(self, var: str):
        self.var = var
        super().__init__(f"variable {var!r} is not bound by a quantifier")


class DisjunctiveConsequent(RuleError):
    def __init__(self, detail: str = ""):
        super().__init__("disjunction in the consequent is not supported" + (f": {detail}" if detail else ""))


class NotContraposable(RuleError):
    pass


class InvalidAuxiliary(RuleError):
    pass


# -- graph -------------------------------------------------------------------


class GraphError(LogAugError):
    pass


class UnknownNode(GraphError):
    def __init__(self, node: int):
        self.node = node
        super().__init__(f"unknown node id {node}")


class UnknownNeuronName(GraphError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no neuron named {name!r}")


class DuplicateName(GraphError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"neuron name {name!r} already registered")


class ShapeMismatch(GraphError):
    pass


class GraphCycle(GraphError):
    pass


# -- soft logic --------------------------------------------------------------


class EmptyAntecedent(LogAugError):
    pass


class OutOfRange(LogAugError):
    def __init__(self, index: int, value: float):
        self.index, self.value = index, value
        super().__init__(f"input {index} = {value!r} lies outside [0, 1]")


# -- augmentation ------------------------------------------------------------


class AugmentError(LogAugError):
    pass


class CyclicRule(AugmentError):
    def __init__(self, stmt, witness: tuple[str, str]):
        self.stmt, self.witness = stmt, witness
        where = f" (line {stmt.line})" if getattr(stmt, "line", None) else ""
        super().__init__(f"rule{where} is cyclic: {witness[0]!r} is upstream of {witness[1]!r}")


class UnknownIndexSet(AugmentError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown index set {name!r}")


class UnknownTable(AugmentError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown predicate table {name!r}")


class NoPreActivation(AugmentError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"neuron {node!r} has no incoming operation to constrain")


# -- runtime -----------------------------------------------------------------


class RuntimeGraphError(LogAugError):
    pass


class MissingBinding(RuntimeGraphError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no value bound for {name!r}")


class NonFiniteValue(RuntimeGraphError):
    def __init__(self, node: int, op: str = ""):
        self.node = node
        super().__init__(f"non-finite value produced at node {node} ({op})")


class NonScalarLoss(RuntimeGraphError):
    pass


class NotNormalized(RuntimeGraphError):
    pass


# -- tasks / cli -------------------------------------------------------------


class EmptyDataset(LogAugError):
    pass


class ConfigError(LogAugError):
    pass
