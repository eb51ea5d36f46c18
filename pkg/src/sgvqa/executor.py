"""Deterministic symbolic interpreter for programs over scene graphs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

from .program import DEFAULT_CATALOG, Catalog, FunctionCall, Program, ValueType
from .scene_graph import POSITION_CATEGORIES, Ontology, SceneGraph, SceneObject, spatial_label

STRICT = "strict"
LENIENT = "lenient"
UNKNOWN_ANSWER = "unknown"


@dataclass(frozen=True)
class ObjList:
    ids: tuple[str, ...]

    type = ValueType.OBJLIST

    def to_json(self):
        return list(self.ids)


@dataclass(frozen=True)
class Bool:
    value: bool

    type = ValueType.BOOLEAN

    def to_json(self):
        return self.value


@dataclass(frozen=True)
class Str:
    value: str

    type = ValueType.STRING

    def to_json(self):
        return self.value


Value = Union[ObjList, Bool, Str]


class ExecError(Exception):
    KINDS = ("EmptyReference", "UnknownAttributeCategory", "UnknownRelation", "TypeMismatch")

    def __init__(self, kind: str, step: int | None, message: str = ""):
        assert kind in self.KINDS
        super().__init__(f"{kind} at step {step}: {message}" if message else f"{kind} at step {step}")
        self.kind = kind
        self.step = step


@dataclass(frozen=True)
class StepRecord:
    index: int
    call: FunctionCall
    inputs: tuple[Value, ...]
    output: Value
    attention: tuple[tuple[str, tuple[float, float, float, float]], ...]
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "idx": self.index,
            "op": self.call.name,
            "args": list(self.call.arguments),
            "deps": list(self.call.dependencies),
            "out_type": self.output.type.value,
            "out": self.output.to_json(),
            "attention": [[oid, *box] for oid, box in self.attention],
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class Trace:
    steps: tuple[StepRecord, ...]
    final: Value
    flags: tuple[str, ...] = field(default=())

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_json(), separators=(",", ":")) + "\n" for s in self.steps)

    def pretty(self) -> str:
        lines = []
        for s in self.steps:
            args = ", ".join(s.call.arguments)
            deps = " ".join(f"[{d}]" for d in s.call.dependencies)
            head = f"{s.index}. {s.call.name}: {args} {deps}".replace(":  ", ": ").rstrip()
            out = s.output.to_json()
            if isinstance(s.output, ObjList):
                out = "{" + ", ".join(out) + "}" if out else "{}"
            lines.append(f"{head}\n     -> {out}")
            if s.attention:
                lines.append("     attends " + ", ".join(oid for oid, _ in s.attention))
            for fl in s.flags:
                lines.append(f"     ! {fl}")
        lines.append(f"answer: {answer_of(self) if not isinstance(self.final, ObjList) else self.final}")
        return "\n".join(lines)


def _attribute(obj: SceneObject, category: str) -> str | None:
    if category == "name":
        return obj.class_name
    if category in POSITION_CATEGORIES:
        return spatial_label(obj.box, category)
    return obj.attributes.get(category)


class _Context:
    def __init__(self, graph: SceneGraph, ontology: Ontology | None, policy: str):
        if policy not in (STRICT, LENIENT):
            raise ValueError(f"unknown policy {policy!r}")
        self.graph = graph
        self.ontology = ontology
        self.policy = policy
        self.flags: list[str] = []

    def known_category(self, category: str) -> bool:
        if category == "name" or category in POSITION_CATEGORIES:
            return True
        if self.ontology is None:
            return True
        return category in self.ontology.attribute_categories

    def fail(self, kind: str, step: int, message: str):
        if self.policy == STRICT:
            raise ExecError(kind, step, message)
        self.flags.append(f"{kind}: {message}")


def apply_function(call: FunctionCall, inputs: Sequence[Value], graph: SceneGraph,
                   ontology: Ontology | None = None, policy: str = LENIENT) -> Value:
    """Evaluate one call on already-computed inputs."""
    value, _ = _apply(call, inputs, _Context(graph, ontology, policy))
    return value


def _objs(v: Value, step: int) -> tuple[str, ...]:
    if not isinstance(v, ObjList):
        raise ExecError("TypeMismatch", step, f"expected ObjList, got {type(v).__name__}")
    return v.ids


def _bool(v: Value, step: int) -> bool:
    if not isinstance(v, Bool):
        raise ExecError("TypeMismatch", step, f"expected Bool, got {type(v).__name__}")
    return v.value


def _apply(call: FunctionCall, inputs: Sequence[Value], ctx: _Context) -> tuple[Value, list[str]]:
    g = ctx.graph
    op, cat, args, i = call.operation, call.category, call.arguments, call.index
    before = len(ctx.flags)

    if cat is not None and not ctx.known_category(cat):
        ctx.fail("UnknownAttributeCategory", i, f"category {cat!r}")
        empty: Value = {ValueType.OBJLIST: ObjList(()), ValueType.BOOLEAN: Bool(False),
                        ValueType.STRING: Str(UNKNOWN_ANSWER)}[DEFAULT_CATALOG.signature(op).output_type]
        return empty, ctx.flags[before:]

    def need_nonempty(ids, what):
        if not ids:
            ctx.fail("EmptyReference", i, f"{what} on an empty object set")
            return False
        return True

    if op == "select":
        name = args[0]
        out = ObjList(tuple(o.id for o in g.objects.values() if name == "scene" or o.class_name == name))
    elif op == "filter":
        ids = _objs(inputs[0], i)
        keep = tuple(oid for oid in ids if (_attribute(g[oid], cat) == args[0]) != call.negate)
        out = ObjList(keep)
    elif op == "relate":
        ids = set(_objs(inputs[0], i))
        name, rel = args
        if ctx.ontology is not None and rel not in ctx.ontology.relations:
            ctx.fail("UnknownRelation", i, f"relation {rel!r}")
            return ObjList(()), ctx.flags[before:]
        hits = set()
        for e in g.edges:
            if e.relation_name != rel:
                continue
            cand, other = (e.subject_id, e.object_id) if call.direction == "subject" else (e.object_id, e.subject_id)
            if other in ids:
                hits.add(cand)
        out = ObjList(tuple(oid for oid, o in g.objects.items()
                            if oid in hits and (name == "_" or o.class_name == name)))
    elif op == "verify":
        ids = _objs(inputs[0], i)
        if need_nonempty(ids, "verify"):
            out = Bool(all(_attribute(g[oid], cat) == args[0] for oid in ids))
        else:
            out = Bool(False)
    elif op == "query":
        ids = _objs(inputs[0], i)
        if need_nonempty(ids, "query"):
            val = _attribute(g[ids[0]], cat)
            if val is None:
                ctx.fail("EmptyReference", i, f"object {ids[0]} has no {cat}")
                val = UNKNOWN_ANSWER
            out = Str(val)
        else:
            out = Str(UNKNOWN_ANSWER)
    elif op == "exist":
        out = Bool(len(_objs(inputs[0], i)) > 0)
    elif op == "and":
        out = Bool(_bool(inputs[0], i) and _bool(inputs[1], i))
    elif op == "or":
        out = Bool(_bool(inputs[0], i) or _bool(inputs[1], i))
    elif op == "choose":
        ids = _objs(inputs[0], i)
        if need_nonempty(ids, "choose"):
            val = _attribute(g[ids[0]], cat)
            if val == args[0] or val == args[1]:
                out = Str(val)
            else:
                ctx.fail("EmptyReference", i, f"{cat} of {ids[0]} is neither {args[0]} nor {args[1]}")
                out = Str(UNKNOWN_ANSWER)
        else:
            out = Str(UNKNOWN_ANSWER)
    elif op in ("same", "different"):
        a, b = _objs(inputs[0], i), _objs(inputs[1], i)
        if need_nonempty(a, op) and need_nonempty(b, op):
            values = {_attribute(g[oid], cat) for oid in a + b}
            same = len(values) == 1 and None not in values
            out = Bool(same if op == "same" else not same)
        else:
            out = Bool(False)
    elif op == "common":
        a, b = _objs(inputs[0], i), _objs(inputs[1], i)
        if need_nonempty(a, op) and need_nonempty(b, op):
            objs = [g[oid] for oid in a + b]
            shared = set.intersection(*(set(o.attributes) for o in objs))
            agree = sorted(c for c in shared if len({o.attributes[c] for o in objs}) == 1)
            out = Str(agree[0] if agree else "none")
        else:
            out = Str(UNKNOWN_ANSWER)
    else:
        raise ExecError("TypeMismatch", i, f"no semantics for {op!r}")
    return out, ctx.flags[before:]


def execute(program: Program, graph: SceneGraph, catalog: Catalog = DEFAULT_CATALOG,
            policy: str = LENIENT, ontology: Ontology | None = None) -> Trace:
    """Run ``program`` on ``graph``; raises :class:`ExecError` under the strict policy."""
    ctx = _Context(graph, ontology, policy)
    outputs: list[Value] = []
    steps: list[StepRecord] = []
    attention: list[tuple[str, ...]] = []
    for call in program.functions:
        sig = catalog.signature(call.operation)
        inputs = tuple(outputs[d] for d in call.dependencies)
        for v, want in zip(inputs, sig.input_types):
            if v.type is not want:
                raise ExecError("TypeMismatch", call.index, f"input is {v.type.value}, expected {want.value}")
        out, flags = _apply(call, inputs, ctx)
        if out.type is not sig.output_type:
            raise ExecError("TypeMismatch", call.index, "output type disagrees with the catalog")
        outputs.append(out)
        if isinstance(out, ObjList):
            att = out.ids
        else:
            anc = _latest_objlist_ancestor(program, call.index, outputs)
            att = attention[anc] if anc is not None else ()
        attention.append(att)
        steps.append(StepRecord(call.index, call, inputs, out,
                                tuple((oid, tuple(graph[oid].box.as_list())) for oid in att), tuple(flags)))
    return Trace(tuple(steps), outputs[-1], tuple(ctx.flags))


def _latest_objlist_ancestor(program: Program, index: int, outputs: Sequence[Value]) -> int | None:
    seen: set[int] = set()
    stack = list(program.functions[index].dependencies)
    while stack:
        d = stack.pop()
        if d not in seen:
            seen.add(d)
            stack.extend(program.functions[d].dependencies)
    objlists = [d for d in seen if isinstance(outputs[d], ObjList)]
    return max(objlists) if objlists else None


def answer_of(trace: Trace) -> str:
    final = trace.final
    if isinstance(final, Bool):
        return "yes" if final.value else "no"
    if isinstance(final, Str):
        return final.value
    raise ExecError("TypeMismatch", len(trace.steps) - 1, "final value is an object list")
