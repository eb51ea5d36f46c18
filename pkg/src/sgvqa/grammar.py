"""Template grammar producing (question, program, answer) triples over scene graphs.

Each template picks fillers from the chosen graph and derives its gold answer
directly from the objects and boxes it picked. That answer is then checked
against the executor, so a corpus is only emitted when both routes agree.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .executor import STRICT, answer_of, execute
from .program import (
    DEFAULT_CATALOG,
    FunctionCall,
    Program,
    ValueType,
    program_from_json,
    program_to_json,
    reindex,
    validate,
)
from .scene_graph import (
    MANDATORY_CATEGORIES,
    POSITION_CATEGORIES,
    Ontology,
    SceneGraph,
    SceneObject,
    spatial_label,
)

L_MAX = 24
_TOKEN = re.compile(r"[a-z0-9]+|[?,]")


class ExhaustedTemplates(Exception):
    pass


def tokenize(question: str) -> list[str]:
    return _TOKEN.findall(question.lower())


@dataclass(frozen=True)
class QAPair:
    question: str
    program: Program
    answer: str
    graph_id: str
    template: str = ""

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.question)

    def to_json(self) -> dict[str, Any]:
        return {"question": self.question, "program": program_to_json(self.program),
                "answer": self.answer, "graph_id": self.graph_id, "template": self.template}

    @classmethod
    def from_json(cls, doc) -> QAPair:
        return cls(doc["question"], program_from_json(doc["program"]), doc["answer"],
                   doc["graph_id"], doc.get("template", ""))


def _call(op, category=None, args=(), deps=(), **kw) -> FunctionCall:
    return FunctionCall(0, op, category, tuple(args), tuple(deps), **kw)


# ---------------------------------------------------------------------------
# templates
#
# A template is fn(graph, ontology, rng) -> (question, calls, answer) or None
# when the graph offers no valid filler.


def _by_class(graph: SceneGraph) -> dict[str, list[SceneObject]]:
    out: dict[str, list[SceneObject]] = {}
    for o in graph.objects.values():
        out.setdefault(o.class_name, []).append(o)
    return out


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _unique_classes(graph):
    return [c for c, objs in _by_class(graph).items() if len(objs) == 1]


def t_exist(graph, onto, rng):
    present = sorted(_by_class(graph))
    if rng.random() < 0.5:
        cls = _pick(rng, present)
    else:
        absent = [c for c in onto.classes if c not in present]
        if not absent:
            return None
        cls = _pick(rng, absent)
    q = f"is there a {cls}?"
    return q, [_call("select", args=[cls]), _call("exist", deps=[0])], "yes" if cls in present else "no"


def t_query(graph, onto, rng):
    uniq = _unique_classes(graph)
    if not uniq:
        return None
    cls = _pick(rng, sorted(uniq))
    cat = _pick(rng, MANDATORY_CATEGORIES)
    obj = _by_class(graph)[cls][0]
    q = f"what {cat} is the {cls}?"
    return q, [_call("select", args=[cls]), _call("query", cat, deps=[0])], obj.attributes[cat]


def t_verify(graph, onto, rng):
    uniq = _unique_classes(graph)
    if not uniq:
        return None
    cls = _pick(rng, sorted(uniq))
    cat = _pick(rng, MANDATORY_CATEGORIES)
    obj = _by_class(graph)[cls][0]
    value = obj.attributes[cat] if rng.random() < 0.5 else _pick(rng, onto.attribute_categories[cat])
    q = f"is the {cls} {value}?"
    calls = [_call("select", args=[cls]), _call("verify", cat, [value], [0])]
    return q, calls, "yes" if obj.attributes[cat] == value else "no"


def t_position_query(graph, onto, rng):
    options = []
    for cls, objs in sorted(_by_class(graph).items()):
        for side in ("left", "right"):
            hit = [o for o in objs if spatial_label(o.box, "hposition") == side]
            if len(hit) == 1:
                options.append((cls, side, hit[0]))
    if not options:
        return None
    cls, side, obj = _pick(rng, options)
    cat = _pick(rng, MANDATORY_CATEGORIES)
    q = f"what {cat} is the {cls} on the {side}?"
    calls = [_call("select", args=[cls]), _call("filter", "hposition", [side], [0]),
             _call("query", cat, deps=[1])]
    return q, calls, obj.attributes[cat]


def _geometric_relation(a: SceneObject, b: SceneObject, rel: str) -> bool:
    """True when ``a`` stands in ``rel`` to ``b`` judged from box centers."""
    (ax, ay), (bx, by) = a.box.center, b.box.center
    return {"to the left of": ax < bx, "to the right of": ax > bx,
            "above": ay < by, "below": ay > by}[rel]


def t_relate_query(graph, onto, rng):
    by_class = _by_class(graph)
    options = []
    for anchor_cls in sorted(_unique_classes(graph)):
        anchor = by_class[anchor_cls][0]
        for rel in onto.relations:
            for cls, objs in sorted(by_class.items()):
                hit = [o for o in objs if o.id != anchor.id and _geometric_relation(o, anchor, rel)]
                if len(hit) == 1:
                    options.append((anchor_cls, rel, cls, hit[0]))
    if not options:
        return None
    anchor_cls, rel, cls, obj = _pick(rng, options)
    cat = _pick(rng, MANDATORY_CATEGORIES)
    q = f"what {cat} is the {cls} {rel} the {anchor_cls}?"
    calls = [_call("select", args=[anchor_cls]), _call("relate", args=[cls, rel], deps=[0]),
             _call("query", cat, deps=[1])]
    return q, calls, obj.attributes[cat]


def t_choose(graph, onto, rng):
    uniq = _unique_classes(graph)
    if not uniq:
        return None
    cls = _pick(rng, sorted(uniq))
    obj = _by_class(graph)[cls][0]
    true_value = obj.attributes["color"]
    other = _pick(rng, [v for v in onto.attribute_categories["color"] if v != true_value])
    v1, v2 = (true_value, other) if rng.random() < 0.5 else (other, true_value)
    q = f"is the {cls} {v1} or {v2}?"
    return q, [_call("select", args=[cls]), _call("choose", "color", [v1, v2], [0])], true_value


def t_logic(graph, onto, rng):
    present = set(_by_class(graph))
    c1, c2 = (str(c) for c in rng.choice(onto.classes, size=2, replace=False))
    conn = "and" if rng.random() < 0.5 else "or"
    q = f"is there a {c1} {conn} a {c2}?"
    calls = [_call("select", args=[c1]), _call("exist", deps=[0]), _call("select", args=[c2]),
             _call("exist", deps=[2]), _call(conn, deps=[1, 3])]
    a, b = c1 in present, c2 in present
    return q, calls, "yes" if (a and b if conn == "and" else a or b) else "no"


def t_same(graph, onto, rng):
    uniq = sorted(_unique_classes(graph))
    if len(uniq) < 2:
        return None
    c1, c2 = (str(c) for c in rng.choice(uniq, size=2, replace=False))
    cat = _pick(rng, MANDATORY_CATEGORIES)
    by_class = _by_class(graph)
    o1, o2 = by_class[c1][0], by_class[c2][0]
    q = f"do the {c1} and the {c2} have the same {cat}?"
    calls = [_call("select", args=[c1]), _call("select", args=[c2]), _call("same", cat, deps=[0, 1])]
    return q, calls, "yes" if o1.attributes[cat] == o2.attributes[cat] else "no"


def t_common(graph, onto, rng):
    uniq = sorted(_unique_classes(graph))
    by_class = _by_class(graph)
    pairs = []
    for i, c1 in enumerate(uniq):
        for c2 in uniq[i + 1:]:
            o1, o2 = by_class[c1][0], by_class[c2][0]
            shared = sorted(c for c in MANDATORY_CATEGORIES if o1.attributes[c] == o2.attributes[c])
            if shared:
                pairs.append((c1, c2, shared[0]))
    if not pairs:
        return None
    c1, c2, answer = _pick(rng, pairs)
    if rng.random() < 0.5:
        c1, c2 = c2, c1
    q = f"what do the {c1} and the {c2} have in common?"
    calls = [_call("select", args=[c1]), _call("select", args=[c2]), _call("common", deps=[0, 1])]
    return q, calls, answer


TEMPLATES: dict[str, Callable] = {
    "exist": t_exist,
    "query": t_query,
    "verify": t_verify,
    "position_query": t_position_query,
    "relate_query": t_relate_query,
    "choose": t_choose,
    "logic": t_logic,
    "same": t_same,
    "common": t_common,
}


@dataclass(frozen=True)
class QuestionGrammar:
    templates: tuple[str, ...] = tuple(TEMPLATES)
    max_tokens: int = L_MAX

    def instantiate(self, name: str, graph: SceneGraph, ontology: Ontology, rng) -> QAPair | None:
        made = TEMPLATES[name](graph, ontology, rng)
        if made is None:
            return None
        question, calls, answer = made
        program = reindex(calls)
        if validate(program):
            raise AssertionError(f"template {name} built an invalid program: {validate(program)}")
        if len(tokenize(question)) > self.max_tokens:
            return None
        return QAPair(question, program, answer, graph.image_id, name)


def generate_corpus(grammar: QuestionGrammar, graphs: Sequence[SceneGraph], n: int, seed: int,
                    ontology: Ontology, max_retries: int = 200) -> list[QAPair]:
    """Draw ``n`` question/program/answer triples, round-robin over templates."""
    if not graphs:
        raise ValueError("graphs must be non-empty")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        name = grammar.templates[k % len(grammar.templates)]
        for _ in range(max_retries):
            graph = graphs[int(rng.integers(len(graphs)))]
            pair = grammar.instantiate(name, graph, ontology, rng)
            if pair is not None:
                break
        else:
            raise ExhaustedTemplates(f"template {name!r} found no filler after {max_retries} graphs")
        executed = answer_of(execute(pair.program, graph, policy=STRICT, ontology=ontology))
        if executed != pair.answer:
            raise AssertionError(f"executor says {executed!r}, template says {pair.answer!r}: {pair}")
        out.append(pair)
    return out


def split_by_graph(pairs: Sequence[QAPair], graph_ids: Sequence[str]) -> dict[str, list[QAPair]]:
    """80/10/10 split, disjoint by graph id (graphs are split in the given order)."""
    n = len(graph_ids)
    cut1, cut2 = int(round(0.8 * n)), int(round(0.9 * n))
    which = {}
    for i, gid in enumerate(graph_ids):
        which[gid] = "train" if i < cut1 else "val" if i < cut2 else "test"
    out: dict[str, list[QAPair]] = {"train": [], "val": [], "test": []}
    for p in pairs:
        out[which[p.graph_id]].append(p)
    return out


def corpus_hash(pairs: Iterable[QAPair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps(p.to_json(), sort_keys=True).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# random well-typed programs (fuzzing)


def random_program(rng, ontology: Ontology, graph: SceneGraph | None = None, max_len: int = 6) -> Program:
    """A random catalog-conforming program with at most ``max_len`` functions.

    Arguments are drawn from ``graph`` when given so selections are often
    non-empty, otherwise from the ontology.
    """
    cats = list(MANDATORY_CATEGORIES) + ["name", "hposition", "vposition"]
    classes = sorted({o.class_name for o in graph.objects.values()}) if graph and graph.objects else list(ontology.classes)

    def values_for(cat):
        if cat == "name":
            return list(ontology.classes)
        if cat in POSITION_CATEGORIES:
            return list(POSITION_CATEGORIES[cat])
        return list(ontology.attribute_categories[cat])

    def obj_chain(budget):
        """Calls producing one ObjList; returns list of (op, cat, args, local deps, extra)."""
        seq = [("select", None, [_pick(rng, classes + ["scene"])], [], {})]
        while len(seq) < budget and rng.random() < 0.5:
            last = len(seq) - 1
            if rng.random() < 0.5:
                cat = _pick(rng, cats)
                seq.append(("filter", cat, [_pick(rng, values_for(cat))], [last],
                            {"negate": bool(rng.random() < 0.2)}))
            else:
                seq.append(("relate", None, [_pick(rng, classes + ["_"]), _pick(rng, list(ontology.relations))],
                            [last], {"direction": "object" if rng.random() < 0.3 else "subject"}))
        return seq

    def shift(seq, offset):
        return [(op, cat, args, [d + offset for d in deps], kw) for op, cat, args, deps, kw in seq]

    for _ in range(100):
        kind = _pick(rng, ["unary", "unary", "binary_obj", "logic"])
        if kind == "unary":
            chain = obj_chain(max_len - 1)
            last = len(chain) - 1
            cat = _pick(rng, cats)
            vals = values_for(cat)
            sink_op = _pick(rng, ["verify", "query", "exist", "choose"])
            if sink_op == "verify":
                sink = ("verify", cat, [_pick(rng, vals)], [last], {})
            elif sink_op == "query":
                sink = ("query", cat, [], [last], {})
            elif sink_op == "exist":
                sink = ("exist", None, [], [last], {})
            else:
                a, b = (str(v) for v in rng.choice(vals, size=2, replace=False))
                sink = ("choose", cat, [a, b], [last], {})
            seq = chain + [sink]
        elif kind == "binary_obj":
            left = obj_chain(max(1, (max_len - 1) // 2))
            right = shift(obj_chain(max(1, max_len - 1 - len(left))), len(left))
            op = _pick(rng, ["same", "different", "common"])
            cat = None if op == "common" else _pick(rng, cats)
            seq = left + right + [(op, cat, [], [len(left) - 1, len(left) + len(right) - 1], {})]
        else:
            left = obj_chain(max(1, (max_len - 3) // 2))
            left = left + [("exist", None, [], [len(left) - 1], {})]
            right = obj_chain(max(1, max_len - 1 - len(left) - 1))
            right = shift(right, len(left))
            right = right + [("exist", None, [], [len(left) + len(right) - 1], {})]
            seq = left + right + [(_pick(rng, ["and", "or"]), None, [], [len(left) - 1, len(left) + len(right) - 1], {})]
        if len(seq) > max_len:
            continue
        calls = [FunctionCall(i, op, cat, tuple(str(a) for a in args), tuple(deps), **kw)
                 for i, (op, cat, args, deps, kw) in enumerate(seq)]
        program = Program(tuple(calls))
        assert not validate(program, DEFAULT_CATALOG), validate(program)
        return program
    raise RuntimeError("could not build a program within max_len")


def objlist_producers(program: Program) -> list[int]:
    return [f.index for f in program.functions
            if DEFAULT_CATALOG.signature(f.operation).output_type is ValueType.OBJLIST]

