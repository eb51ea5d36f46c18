import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgvqa.scene_graph import (  # noqa: E402
    BoundingBox,
    RelationEdge,
    SceneGraph,
    SceneObject,
    default_ontology,
    generate_scene,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture(scope="session")
def gqa_scene_doc():
    return json.loads((FIXTURES / "gqa_scene.json").read_text())


@pytest.fixture(scope="session")
def gqa_questions():
    return json.loads((FIXTURES / "gqa_questions.json").read_text())


def obj(oid, cls, box, **attrs):
    base = {"color": "red", "material": "wood", "size": "small", "shape": "round"}
    base.update(attrs)
    return SceneObject(oid, cls, base, BoundingBox(*box))


def make_graph(objects, edges=(), image_id="fixture"):
    return SceneGraph(image_id, {o.id: o for o in objects}, tuple(RelationEdge(*e) for e in edges))


@pytest.fixture
def bird_graph():
    """Two birds (one on the left third), a chair and a table."""
    objects = [
        obj("o1", "bird", (0.05, 0.40, 0.10, 0.10), color="black"),
        obj("o2", "chair", (0.40, 0.40, 0.10, 0.20), color="red", material="wood"),
        obj("o3", "table", (0.60, 0.50, 0.20, 0.20), material="metal", size="large", shape="square"),
        obj("o4", "bird", (0.80, 0.10, 0.10, 0.10), color="white"),
    ]
    edges = [("o1", "to the left of", "o2"), ("o2", "to the right of", "o1"),
             ("o2", "to the left of", "o3"), ("o3", "to the right of", "o2")]
    return make_graph(objects, edges)


@pytest.fixture(scope="session")
def small_world(ontology):
    rng = np.random.default_rng(11)
    return [generate_scene(ontology, int(rng.integers(2, 9)), 1000 + i) for i in range(60)]


PARSER_STEPS = 3000


@pytest.fixture(scope="session")
def parser_world(ontology):
    from sgvqa.pipeline import build_world

    return build_world(ontology, n_graphs=500, n_questions=2000, seed=0)


@pytest.fixture(scope="session")
def trained_parser(parser_world):
    """Toy-scale parser trained once per session: (model, train result, seconds)."""
    import time

    from sgvqa.parser import ParserConfig, Seq2SeqParser

    model = Seq2SeqParser.from_corpus(parser_world.splits["train"], ParserConfig.toy())
    start = time.perf_counter()
    result = model.train(parser_world.splits["train"], steps=PARSER_STEPS)
    return model, result, time.perf_counter() - start


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
