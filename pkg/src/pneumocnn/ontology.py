"""A small ontology language with forward-chaining inference.

Text format, one statement per line (``#`` starts a comment)::

    concept LungOpacity
    isa LungOpacity OpacityRegion
    rule R1: LungOpacity & InfectionPattern => Pneumonia
    map p_cnn >= 0.7 -> LungOpacity
    map fever == yes -> InfectionPattern

``map`` statements assert a concept for a case when the predicate holds over
the case fields: ``p_cnn``, ``age_months`` and any metadata key. A missing
field makes the predicate false.
"""
from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping as MappingT

from .errors import OntologyError, UsageError

PNEUMONIA_DETECTED = "Pneumonia detected"
FURTHER_INVESTIGATION = "Further investigation required"
DEFAULT_THRESHOLD = 0.7

_OPS = {
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
    "==": operator.eq,
}
_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_RE_CONCEPT = re.compile(rf"^concept\s+({_IDENT})$")
_RE_ISA = re.compile(rf"^isa\s+({_IDENT})\s+({_IDENT})$")
_RE_RULE = re.compile(rf"^rule\s+({_IDENT})\s*:\s*(.+?)\s*=>\s*({_IDENT})$")
_RE_MAP = re.compile(rf"^map\s+({_IDENT})\s*(<=|>=|==|<|>)\s*(\S+)\s*->\s*({_IDENT})$")


@dataclass(frozen=True)
class Rule:
    name: str
    body: tuple
    head: str


@dataclass(frozen=True)
class Mapping:
    field: str
    op: str
    value: str
    concept: str

    def holds(self, fields: MappingT[str, object]) -> bool:
        if self.field not in fields or fields[self.field] is None:
            return False
        actual = fields[self.field]
        try:
            return _OPS[self.op](float(actual), float(self.value))
        except (TypeError, ValueError):
            # non-numeric values only support equality
            return self.op == "==" and str(actual) == self.value

    def __str__(self):
        return f"{self.field} {self.op} {self.value} -> {self.concept}"


@dataclass(frozen=True)
class Ontology:
    concepts: frozenset = frozenset()
    isa: tuple = ()
    rules: tuple = ()
    mappings: tuple = ()
    parents: dict = field(default_factory=dict, compare=False, repr=False)

    def ancestors(self, concept: str) -> set:
        seen: set = set()
        stack = [concept]
        while stack:
            for parent in self.parents.get(stack.pop(), ()):
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        return seen


@dataclass(frozen=True)
class Inference:
    closure: frozenset
    trace: tuple


@dataclass(frozen=True)
class Diagnosis:
    verdict: str
    p_cnn: float
    inferred: frozenset
    trace: tuple
    asserted: frozenset = frozenset()


def parse_ontology(text: str) -> Ontology:
    """Parse and validate ontology text; errors carry the 1-based line number."""
    concepts: dict[str, int] = {}
    isa: list = []
    rules: list = []
    mappings: list = []
    refs: list = []  # (concept, line) pairs to check once all declarations are known
    rule_names: set = set()
    edge_lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if m := _RE_CONCEPT.match(line):
            if m[1] in concepts:
                raise OntologyError(f"concept {m[1]} declared twice", lineno, "duplicate")
            concepts[m[1]] = lineno
        elif m := _RE_ISA.match(line):
            isa.append((m[1], m[2]))
            edge_lines.setdefault((m[1], m[2]), lineno)
            refs += [(m[1], lineno), (m[2], lineno)]
        elif m := _RE_RULE.match(line):
            body = tuple(part.strip() for part in m[2].split("&"))
            if not all(re.fullmatch(_IDENT, b) for b in body):
                raise OntologyError(f"malformed rule body {m[2]!r}", lineno, "syntax")
            if m[1] in rule_names:
                raise OntologyError(f"rule {m[1]} defined twice", lineno, "duplicate")
            rule_names.add(m[1])
            rules.append(Rule(m[1], body, m[3]))
            refs += [(c, lineno) for c in body] + [(m[3], lineno)]
        elif m := _RE_MAP.match(line):
            mappings.append(Mapping(m[1], m[2], m[3], m[4]))
            refs.append((m[4], lineno))
        else:
            raise OntologyError(f"cannot parse {line!r}", lineno, "syntax")
    for concept, lineno in refs:
        if concept not in concepts:
            raise OntologyError(f"undeclared concept {concept}", lineno, "undeclared")
    parents: dict[str, list] = {}
    for child, parent in isa:
        parents.setdefault(child, []).append(parent)
    _check_acyclic(parents, edge_lines)
    return Ontology(frozenset(concepts), tuple(isa), tuple(rules), tuple(mappings), parents)


def _check_acyclic(parents, edge_lines):
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(node, path):
        state[node] = 1
        for parent in parents.get(node, ()):
            if state.get(parent) == 1:
                cycle = path[path.index(parent):] + [parent] if parent in path else [node, parent]
                line = edge_lines.get((node, parent))
                raise OntologyError(f"is-a cycle: {' -> '.join(cycle)}", line, "cycle")
            if parent not in state:
                visit(parent, path + [parent])
        state[node] = 2

    for node in sorted(parents):
        if node not in state:
            visit(node, [node])


def load_default_ontology() -> Ontology:
    return parse_ontology(default_ontology_text())


def default_ontology_text() -> str:
    return resources.files("pneumocnn").joinpath("resources/pneumonia.onto").read_text()


def _check_known(o: Ontology, concepts: Iterable[str]):
    unknown = set(concepts) - o.concepts
    if unknown:
        raise UsageError(f"findings reference undeclared concepts: {sorted(unknown)}")


def infer(o: Ontology, findings: Iterable[str]) -> Inference:
    """Least fixpoint of is-a ancestor closure and Horn rules.

    Rules are scanned in declaration order, repeatedly, until a pass adds
    nothing. A rule is recorded in the trace the first time it adds its head.
    """
    findings = set(findings)
    _check_known(o, findings)
    closure = set(findings)
    for c in findings:
        closure |= o.ancestors(c)
    trace = []
    changed = True
    while changed:
        changed = False
        for rule in o.rules:
            if rule.head not in closure and all(b in closure for b in rule.body):
                closure.add(rule.head)
                closure |= o.ancestors(rule.head)
                trace.append(rule.name)
                changed = True
    return Inference(frozenset(closure), tuple(trace))


def case_fields(record=None, p_cnn: float | None = None) -> dict:
    """Field values a ``map`` predicate may test: p_cnn, age_months and metadata keys."""
    fields: dict = {}
    if record is not None:
        fields.update(dict(record.metadata))
        if record.age_months is not None:
            fields["age_months"] = record.age_months
    if p_cnn is not None:
        fields["p_cnn"] = p_cnn
    return fields


def apply_mappings(mappings: Iterable[Mapping], fields, concepts=None) -> frozenset:
    out = set()
    for m in mappings:
        if concepts is not None and m.concept not in concepts:
            raise OntologyError(f"mapping targets undeclared concept {m.concept}", None, "undeclared")
        if m.holds(fields):
            out.add(m.concept)
    return frozenset(out)


def annotate_case(p_cnn: float, record, o: Ontology) -> frozenset:
    """Concepts whose mapping predicate holds for this case (``record`` may be None)."""
    return apply_mappings(o.mappings, case_fields(record, p_cnn), o.concepts)


def fuse_decision(
    p_cnn: float,
    inference: Inference,
    o: Ontology,
    target: str = "Pneumonia",
    threshold: float = DEFAULT_THRESHOLD,
    asserted: Iterable[str] = (),
) -> Diagnosis:
    """Detection requires both p_cnn strictly above ``threshold`` and ``target`` in the closure."""
    if target not in o.concepts:
        raise OntologyError(f"target concept {target} is not declared", None, "undeclared")
    detected = p_cnn > threshold and target in inference.closure
    verdict = PNEUMONIA_DETECTED if detected else FURTHER_INVESTIGATION
    return Diagnosis(verdict, p_cnn, inference.closure, inference.trace, frozenset(asserted))


def diagnose_case(p_cnn, record, o: Ontology, target="Pneumonia", threshold=DEFAULT_THRESHOLD) -> Diagnosis:
    asserted = annotate_case(p_cnn, record, o)
    return fuse_decision(p_cnn, infer(o, asserted), o, target, threshold, asserted)
