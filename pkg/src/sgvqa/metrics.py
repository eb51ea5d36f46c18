"""Answer-level scoring: accuracy, binary/open split, validity, plausibility, distribution."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .program import DEFAULT_CATALOG, Catalog, Program
from .scene_graph import POSITION_CATEGORIES, Ontology, SceneGraph, spatial_label

YES_NO = frozenset({"yes", "no"})
COLUMNS = ("Binary", "Open", "Validity", "Plausibility", "Distribution", "Accuracy")


class EmptyInput(ValueError):
    pass


class UnknownCategory(KeyError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    question_id: str
    predicted: str
    gold: str
    group: tuple[str, str, str]
    scope: frozenset[str]
    binary: bool
    subject: tuple[str, str] | None = None  # (subject class, category) when plausibility is table-driven


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    binary: float
    open: float
    validity: float
    plausibility: float
    distribution: float
    count: int
    binary_count: int
    open_count: int

    def to_json(self) -> dict:
        return asdict(self)


def answer_scope(program: Program, ontology: Ontology) -> frozenset[str]:
    sink = program.sink
    op, cat = sink.operation, sink.category
    if op in ("verify", "exist", "and", "or", "same", "different"):
        return YES_NO
    if op == "choose":
        return frozenset(sink.arguments)
    if op == "common":
        return frozenset(ontology.attribute_categories) | {"none"}
    if op == "query":
        if cat == "name":
            return frozenset(ontology.classes)
        if cat == "hposition":
            return frozenset({"left", "middle", "right"})
        if cat == "vposition":
            return frozenset({"top", "middle", "bottom"})
        if cat in ontology.attribute_categories:
            return frozenset(ontology.attribute_categories[cat])
        raise UnknownCategory(cat)
    raise UnknownCategory(f"no answer scope for a sink of type {op!r}")


def group_key(program: Program) -> tuple[str, str, str]:
    """(sink operation, sink category, head argument); the head argument is the first call's first argument."""
    sink, head = program.sink, program.functions[0]
    return sink.operation, sink.category or "", head.arguments[0] if head.arguments else ""


def subject_of(program: Program) -> tuple[str, str] | None:
    """(class, category) for query sinks whose object chain names a class; else None."""
    sink = program.sink
    if sink.operation != "query" or sink.category == "name" or not sink.dependencies:
        return None
    call = program.functions[sink.dependencies[0]]
    while True:
        if call.operation == "select":
            name = call.arguments[0]
            break
        if call.operation == "relate":
            name = call.arguments[0]
            break
        call = program.functions[call.dependencies[0]]
    if name in ("scene", "_"):
        return None
    return name, sink.category


def is_binary(program: Program, catalog: Catalog = DEFAULT_CATALOG) -> bool:
    return program.sink.operation in catalog.F_B or program.sink.operation == "choose"


def make_record(question_id: str, program: Program, predicted: str, gold: str, ontology: Ontology) -> PredictionRecord:
    return PredictionRecord(question_id, predicted, gold, group_key(program), answer_scope(program, ontology),
                            is_binary(program), subject_of(program))


def plausibility_from_graphs(graphs: Iterable[SceneGraph]) -> frozenset[tuple[str, str, str]]:
    """(class, category, value) triples observed on gold objects."""
    out = set()
    for g in graphs:
        for o in g.objects.values():
            for cat, val in o.attributes.items():
                out.add((o.class_name, cat, val))
            for cat in POSITION_CATEGORIES:
                out.add((o.class_name, cat, spatial_label(o.box, cat)))
    return frozenset(out)


def _plausible(r: PredictionRecord, table) -> bool:
    if r.predicted in YES_NO:
        return True
    if r.subject is None:
        return r.predicted in r.scope
    return (r.subject[0], r.subject[1], r.predicted) in table


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def total_variation(gold: Counter, predicted: Counter) -> float:
    ng, np_ = sum(gold.values()), sum(predicted.values())
    keys = set(gold) | set(predicted)
    return 0.5 * sum(abs(gold[k] / ng - predicted[k] / np_) for k in keys)


def group_distribution(records: Sequence[PredictionRecord]) -> dict[tuple[str, str, str], float]:
    """Per-group total variation distance x 100 between gold and predicted answer frequencies."""
    gold: dict = defaultdict(Counter)
    pred: dict = defaultdict(Counter)
    for r in records:
        gold[r.group][r.gold] += 1
        pred[r.group][r.predicted] += 1
    return {k: 100.0 * total_variation(gold[k], pred[k]) for k in sorted(gold)}


def score(records: Sequence[PredictionRecord], plausibility_table=frozenset()) -> MetricReport:
    if not records:
        raise EmptyInput("no prediction records")
    n = len(records)
    correct = [r.predicted == r.gold for r in records]
    b = [c for c, r in zip(correct, records) if r.binary]
    o = [c for c, r in zip(correct, records) if not r.binary]
    per_group = group_distribution(records)
    return MetricReport(
        accuracy=_pct(sum(correct), n),
        binary=_pct(sum(b), len(b)),
        open=_pct(sum(o), len(o)),
        validity=_pct(sum(r.predicted in r.scope for r in records), n),
        plausibility=_pct(sum(_plausible(r, plausibility_table) for r in records), n),
        distribution=sum(per_group.values()) / len(per_group),
        count=n,
        binary_count=len(b),
        open_count=len(o),
    )


def round_half_up(x: float, places: int = 2) -> str:
    return str(Decimal(repr(x)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def format_report(report: MetricReport, label: str = "") -> str:
    values = [report.binary, report.open, report.validity, report.plausibility, report.distribution, report.accuracy]
    header = " ".join(f"{c + (' ↓' if c == 'Distribution' else ''):>14}" for c in COLUMNS)
    row = " ".join(f"{round_half_up(v):>14}" for v in values)
    if label:
        header, row = f"{'':<12}" + header, f"{label:<12}" + row
    return header + "\n" + row


def report_row(report: MetricReport) -> str:
    """The bare numeric row, single-space separated."""
    values = [report.binary, report.open, report.validity, report.plausibility, report.distribution, report.accuracy]
    return " ".join(round_half_up(v) for v in values)


def dumps_report(report: MetricReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True)
