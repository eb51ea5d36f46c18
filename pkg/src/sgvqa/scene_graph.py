"""Scene-graph data model, ingestion, synthetic worlds, noise and region features.

Boxes are stored in normalized image coordinates ([0, 1] on both axes, origin at
the top-left corner). Graphs are treated as immutable once built.
"""

from __future__ import annotations

import functools
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

MANDATORY_CATEGORIES = ("color", "material", "size", "shape")
SPATIAL_RELATIONS = ("to the left of", "to the right of", "above", "below")
POSITION_CATEGORIES = {
    "hposition": ("left", "middle", "right"),
    "vposition": ("top", "middle", "bottom"),
}
MIN_CENTER_DISTANCE = 0.05


class SceneGraphError(Exception):
    pass


class MalformedDocument(SceneGraphError):
    pass


class DanglingRelation(SceneGraphError):
    pass


class PlacementFailure(SceneGraphError):
    pass


class UnknownObject(SceneGraphError, KeyError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive extent: {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > 1 + 1e-9 or self.y + self.h > 1 + 1e-9:
            raise ValueError(f"box outside the unit square: {self}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class SceneObject:
    id: str
    class_name: str
    attributes: Mapping[str, str]
    box: BoundingBox


@dataclass(frozen=True)
class RelationEdge:
    subject_id: str
    relation_name: str
    object_id: str


@dataclass(frozen=True)
class SceneGraph:
    image_id: str
    objects: Mapping[str, SceneObject]
    edges: tuple[RelationEdge, ...]
    # ingestion bookkeeping; not part of graph identity
    dropped_edges: int = field(default=0, compare=False)
    unknown_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for key, obj in self.objects.items():
            if key != obj.id:
                raise ValueError(f"object keyed {key!r} has id {obj.id!r}")
        for e in self.edges:
            if e.subject_id == e.object_id:
                raise ValueError(f"self-loop edge on {e.subject_id!r}")
            if e.subject_id not in self.objects or e.object_id not in self.objects:
                raise ValueError(f"edge references a missing object: {e}")

    def __getitem__(self, object_id: str) -> SceneObject:
        try:
            return self.objects[object_id]
        except KeyError:
            raise UnknownObject(object_id) from None

    def ids(self) -> list[str]:
        return list(self.objects)


@dataclass(frozen=True)
class Ontology:
    classes: tuple[str, ...]
    attribute_categories: Mapping[str, tuple[str, ...]]
    relations: tuple[str, ...]
    plausibility_table: Mapping[tuple[str, str], frozenset[str]]

    def __post_init__(self):
        missing = [c for c in MANDATORY_CATEGORIES if c not in self.attribute_categories]
        if missing:
            raise ValueError(f"ontology lacks mandatory categories {missing}")
        for cat, values in self.attribute_categories.items():
            if {"yes", "no"} & set(values):
                raise ValueError(f"category {cat!r} overlaps the yes/no answers")
        for (cls, cat), values in self.plausibility_table.items():
            allowed = set(self.attribute_categories.get(cat, ()))
            if not set(values) <= allowed:
                raise ValueError(f"plausible values for ({cls}, {cat}) outside the category")

    @functools.cached_property
    def value_to_category(self) -> dict[str, str]:
        out = {}
        for cat, values in self.attribute_categories.items():
            for v in values:
                out.setdefault(v, cat)
        return out

    def plausible_values(self, class_name: str, category: str) -> tuple[str, ...]:
        vals = self.plausibility_table.get((class_name, category))
        if vals:
            return tuple(v for v in self.attribute_categories[category] if v in vals)
        return tuple(self.attribute_categories[category])

    def feature_vocabulary(self) -> tuple[str, ...]:
        """Symbol slots used by the one-hot content encoding of a region."""
        slots = [f"class:{c}" for c in self.classes]
        for cat in sorted(self.attribute_categories):
            slots.extend(f"{cat}:{v}" for v in self.attribute_categories[cat])
        return tuple(slots)

    def to_json(self) -> dict[str, Any]:
        return {
            "classes": list(self.classes),
            "attribute_categories": {k: list(v) for k, v in self.attribute_categories.items()},
            "relations": list(self.relations),
            "plausibility_table": [
                [cls, cat, sorted(vals)] for (cls, cat), vals in sorted(self.plausibility_table.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> Ontology:
        return cls(
            classes=tuple(doc["classes"]),
            attribute_categories={k: tuple(v) for k, v in doc["attribute_categories"].items()},
            relations=tuple(doc["relations"]),
            plausibility_table={
                (row[0], row[1]): frozenset(row[2]) for row in doc.get("plausibility_table", [])
            },
        )


def default_ontology() -> Ontology:
    """Small household-object world used by the synthetic generator and the tests."""
    colors = ("red", "blue", "green", "yellow", "white", "black")
    materials = ("metal", "wood", "plastic", "glass")
    sizes = ("large", "small")
    shapes = ("round", "square", "rectangular")
    table = {
        ("ball", "shape"): {"round"},
        ("ball", "material"): {"plastic", "metal"},
        ("box", "shape"): {"square", "rectangular"},
        ("cup", "shape"): {"round"},
        ("cup", "material"): {"glass", "plastic", "metal"},
        ("cup", "size"): {"small"},
        ("chair", "material"): {"wood", "metal", "plastic"},
        ("chair", "shape"): {"square", "rectangular"},
        ("chair", "color"): {"red", "blue", "black", "white"},
        ("table", "material"): {"wood", "metal", "glass"},
        ("table", "size"): {"large"},
        ("vase", "material"): {"glass", "metal"},
        ("vase", "shape"): {"round", "rectangular"},
        ("lamp", "color"): {"white", "black", "yellow"},
        ("lamp", "material"): {"metal", "glass"},
        ("book", "shape"): {"rectangular"},
        ("book", "material"): {"plastic", "wood"},
        ("book", "size"): {"small"},
    }
    return Ontology(
        classes=("ball", "box", "cup", "chair", "table", "vase", "lamp", "book"),
        attribute_categories={"color": colors, "material": materials, "size": sizes, "shape": shapes},
        relations=SPATIAL_RELATIONS,
        plausibility_table={k: frozenset(v) for k, v in table.items()},
    )


# ---------------------------------------------------------------------------
# ingestion and serialization


def load_scene_graph(document: Mapping[str, Any], ontology: Ontology, image_id: str | None = None) -> SceneGraph:
    """Read one GQA-format scene-graph record.

    Pixel boxes are normalized by the image size. Relations pointing at ids that
    are absent from the record are dropped and counted in ``dropped_edges``.
    Unknown class and relation names are kept verbatim and listed in
    ``unknown_names``; attribute strings that map to no ontology category are
    skipped and listed there too.
    """
    try:
        width = float(document["width"])
        height = float(document["height"])
        raw_objects = document["objects"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedDocument(f"missing image field: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedDocument("image width/height must be positive")
    image_id = str(image_id if image_id is not None else document.get("image_id", document.get("id", "")))

    unknown: list[str] = []
    objects: dict[str, SceneObject] = {}
    pending: list[tuple[str, str, str]] = []
    for oid, rec in raw_objects.items():
        oid = str(oid)
        try:
            name = rec["name"]
            px, py, pw, ph = (float(rec[k]) for k in ("x", "y", "w", "h"))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDocument(f"object {oid}: missing field {exc}") from None
        if name not in ontology.classes:
            unknown.append(f"class:{name}")
        attrs: dict[str, str] = {}
        for value in rec.get("attributes", []):
            cat = ontology.value_to_category.get(value)
            if cat is None:
                unknown.append(f"attribute:{value}")
            elif cat not in attrs:
                attrs[cat] = value
        objects[oid] = SceneObject(oid, name, attrs, _normalized_box(px, py, pw, ph, width, height))
        for rel in rec.get("relations", []):
            try:
                pending.append((oid, rel["name"], str(rel["object"])))
            except (KeyError, TypeError) as exc:
                raise MalformedDocument(f"object {oid}: bad relation {exc}") from None

    edges = []
    dropped = 0
    for s, r, o in pending:
        if o not in objects or o == s:
            dropped += 1
            continue
        if r not in ontology.relations:
            unknown.append(f"relation:{r}")
        edges.append(RelationEdge(s, r, o))
    return SceneGraph(image_id, objects, tuple(edges), dropped, tuple(dict.fromkeys(unknown)))


def _normalized_box(px, py, pw, ph, width, height) -> BoundingBox:
    x = min(max(px / width, 0.0), 1.0)
    y = min(max(py / height, 0.0), 1.0)
    w = min(max(pw / width, 0.0), 1.0 - x)
    h = min(max(ph / height, 0.0), 1.0 - y)
    # degenerate annotations get a sliver inside the image
    tiny = 1e-6
    if w <= 0:
        x, w = min(x, 1.0 - tiny), tiny
    if h <= 0:
        y, h = min(y, 1.0 - tiny), tiny
    return BoundingBox(x, y, w, h)


def graph_to_json(graph: SceneGraph) -> dict[str, Any]:
    return {
        "image_id": graph.image_id,
        "width": 1,
        "height": 1,
        "objects": [
            {
                "id": o.id,
                "class": o.class_name,
                "attributes": {k: o.attributes[k] for k in sorted(o.attributes)},
                "box": o.box.as_list(),
            }
            for o in graph.objects.values()
        ],
        "edges": [[e.subject_id, e.relation_name, e.object_id] for e in graph.edges],
    }


def dumps_graph(graph: SceneGraph) -> str:
    return json.dumps(graph_to_json(graph), separators=(",", ":"))


def graph_from_json(doc: Mapping[str, Any]) -> SceneGraph:
    try:
        objects = {}
        for rec in doc["objects"]:
            objects[str(rec["id"])] = SceneObject(
                str(rec["id"]), rec["class"], dict(rec.get("attributes", {})), BoundingBox(*rec["box"])
            )
        edges = tuple(RelationEdge(str(s), r, str(o)) for s, r, o in doc.get("edges", []))
        return SceneGraph(str(doc["image_id"]), objects, edges)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedDocument(f"bad canonical scene: {exc}") from None


def loads_graph(text: str) -> SceneGraph:
    return graph_from_json(json.loads(text))


def read_any_graph(doc: Mapping[str, Any], ontology: Ontology) -> SceneGraph:
    """Canonical records have a list of objects; GQA records key objects by id."""
    if isinstance(doc.get("objects"), list):
        return graph_from_json(doc)
    return load_scene_graph(doc, ontology)


def validate_graph(graph: SceneGraph, ontology: Ontology | None = None) -> list[str]:
    problems = []
    for o in graph.objects.values():
        b = o.box
        if not (b.w > 0 and b.h > 0 and b.x >= 0 and b.y >= 0 and b.x + b.w <= 1 + 1e-9 and b.y + b.h <= 1 + 1e-9):
            problems.append(f"{o.id}: box out of range")
        if ontology is not None:
            if o.class_name not in ontology.classes:
                problems.append(f"{o.id}: unknown class {o.class_name}")
            for cat, v in o.attributes.items():
                if v not in ontology.attribute_categories.get(cat, ()):
                    problems.append(f"{o.id}: {cat}={v} not in vocabulary")
    for e in graph.edges:
        if e.subject_id == e.object_id:
            problems.append(f"self-loop {e}")
        if e.subject_id not in graph.objects or e.object_id not in graph.objects:
            problems.append(f"dangling {e}")
    return problems


# ---------------------------------------------------------------------------
# geometry


def spatial_label(box: BoundingBox, category: str) -> str:
    cx, cy = box.center
    c = cx if category == "hposition" else cy
    if category not in POSITION_CATEGORIES:
        raise ValueError(f"not a position category: {category}")
    lo, mid, hi = POSITION_CATEGORIES[category]
    if c < 1 / 3:
        return lo
    if c > 2 / 3:
        return hi
    return mid


def spatial_predicate(graph: SceneGraph, object_id: str, predicate: str) -> bool:
    """Evaluate ``hposition:left`` style predicates by image thirds of the box center."""
    category, _, value = predicate.partition(":")
    if category not in POSITION_CATEGORIES or value not in POSITION_CATEGORIES[category]:
        raise ValueError(f"unknown spatial predicate {predicate!r}")
    return spatial_label(graph[object_id].box, category) == value


def spatial_edges(a: SceneObject, b: SceneObject) -> list[RelationEdge]:
    """Edges implied by the box centers of ``a`` and ``b`` (both directions)."""
    (ax, ay), (bx, by) = a.box.center, b.box.center
    out = []
    if ax < bx:
        out += [RelationEdge(a.id, "to the left of", b.id), RelationEdge(b.id, "to the right of", a.id)]
    elif bx < ax:
        out += [RelationEdge(b.id, "to the left of", a.id), RelationEdge(a.id, "to the right of", b.id)]
    if ay < by:
        out += [RelationEdge(a.id, "above", b.id), RelationEdge(b.id, "below", a.id)]
    elif by < ay:
        out += [RelationEdge(b.id, "above", a.id), RelationEdge(a.id, "below", b.id)]
    return out


# ---------------------------------------------------------------------------
# synthetic worlds


def generate_scene(ontology: Ontology, n_objects: int, seed: int, max_retries: int = 2000) -> SceneGraph:
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    rng = np.random.default_rng(seed)
    boxes: list[BoundingBox] = []
    for _ in range(n_objects):
        for _attempt in range(max_retries):
            w, h = rng.uniform(0.05, 0.3, size=2)
            x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            box = BoundingBox(float(x), float(y), float(w), float(h))
            cx, cy = box.center
            if all(math.hypot(cx - b.center[0], cy - b.center[1]) > MIN_CENTER_DISTANCE for b in boxes):
                boxes.append(box)
                break
        else:
            raise PlacementFailure(f"could not place object {len(boxes)} of {n_objects}")

    objects: dict[str, SceneObject] = {}
    for i, box in enumerate(boxes):
        cls = ontology.classes[int(rng.integers(len(ontology.classes)))]
        attrs = {}
        for cat in MANDATORY_CATEGORIES:
            choices = ontology.plausible_values(cls, cat)
            attrs[cat] = choices[int(rng.integers(len(choices)))]
        oid = f"o{i}"
        objects[oid] = SceneObject(oid, cls, attrs, box)

    edges: list[RelationEdge] = []
    obj_list = list(objects.values())
    for i, a in enumerate(obj_list):
        for b in obj_list[i + 1:]:
            edges.extend(e for e in spatial_edges(a, b) if e.relation_name in ontology.relations)
    return SceneGraph(f"syn-{seed}", objects, tuple(edges))


@dataclass(frozen=True)
class NoiseSpec:
    p_class: float = 0.0
    p_attr: float = 0.0
    p_drop_edge: float = 0.0
    p_drop_obj: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_class", "p_attr", "p_drop_edge", "p_drop_obj"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")


def corrupt(graph: SceneGraph, spec: NoiseSpec, ontology: Ontology,
            protected: Iterable[str] = ()) -> SceneGraph:
    """Independently perturb classes, attribute values, edges and objects.

    Ids in ``protected`` are never deleted. Every random draw is made whether or
    not it fires, so the outcome for one element does not shift the others.
    """
    rng = np.random.default_rng(spec.seed)
    protected = set(protected)
    objects: dict[str, SceneObject] = {}
    for obj in graph.objects.values():
        drop_draw, class_draw, class_pick = rng.random(), rng.random(), rng.random()
        cls = obj.class_name
        if class_draw < spec.p_class:
            others = [c for c in ontology.classes if c != cls]
            if others:
                cls = others[int(class_pick * len(others))]
        attrs = {}
        for cat in sorted(obj.attributes):
            value = obj.attributes[cat]
            attr_draw, attr_pick = rng.random(), rng.random()
            if attr_draw < spec.p_attr:
                others = [v for v in ontology.attribute_categories.get(cat, ()) if v != value]
                if others:
                    value = others[int(attr_pick * len(others))]
            attrs[cat] = value
        if drop_draw < spec.p_drop_obj and obj.id not in protected:
            continue
        objects[obj.id] = SceneObject(obj.id, cls, {k: attrs[k] for k in obj.attributes}, obj.box)
    edges = []
    for e in graph.edges:
        if rng.random() < spec.p_drop_edge:
            continue
        if e.subject_id in objects and e.object_id in objects:
            edges.append(e)
    return SceneGraph(graph.image_id, objects, tuple(edges))


# ---------------------------------------------------------------------------
# synthetic region features


@functools.lru_cache(maxsize=32)
def projection_matrix(vocabulary: tuple[str, ...], feature_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, feature_dim, len(vocabulary)])
    P = rng.standard_normal((feature_dim, len(vocabulary)))
    P.setflags(write=False)
    return P


def content_onehot(obj: SceneObject, vocabulary: tuple[str, ...]) -> np.ndarray:
    index = {s: i for i, s in enumerate(vocabulary)}
    vec = np.zeros(len(vocabulary))
    slots = [f"class:{obj.class_name}"] + [f"{c}:{v}" for c, v in obj.attributes.items()]
    for s in slots:
        if s in index:
            vec[index[s]] = 1.0
    return vec


def roi_feature(graph: SceneGraph, object_id: str, feature_dim: int, seed: int, ontology: Ontology,
                noise_scale: float = 0.1, noise_seed: int = 0) -> np.ndarray:
    """Stand-in RoI feature: a fixed random projection of the object's symbols plus noise."""
    if feature_dim < 8:
        raise ValueError("feature_dim must be >= 8")
    obj = graph[object_id]
    vocab = ontology.feature_vocabulary()
    r = projection_matrix(vocab, feature_dim, seed) @ content_onehot(obj, vocab)
    if noise_scale > 0:
        key = zlib.crc32(f"{graph.image_id}/{object_id}".encode())
        r = r + noise_scale * np.random.default_rng([noise_seed, key]).standard_normal(feature_dim)
    return r


def roi_features(graph: SceneGraph, feature_dim: int, seed: int, ontology: Ontology,
                 noise_scale: float = 0.1, noise_seed: int = 0) -> dict[str, np.ndarray]:
    return {oid: roi_feature(graph, oid, feature_dim, seed, ontology, noise_scale, noise_seed)
            for oid in graph.objects}
