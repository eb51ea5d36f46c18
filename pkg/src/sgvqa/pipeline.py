"""End-to-end helpers: synthetic worlds, symbolic and soft-path evaluation, the noise experiment."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .encoder import CrossModalEncoder, EncoderConfig, Example, answer_vocabulary
from .executor import LENIENT, answer_of, execute
from .grammar import QAPair, QuestionGrammar, generate_corpus, split_by_graph
from .metrics import PredictionRecord, make_record
from .scene_graph import NoiseSpec, Ontology, SceneGraph, corrupt, default_ontology, generate_scene, roi_features


@dataclass
class World:
    ontology: Ontology
    graphs: list[SceneGraph]
    pairs: list[QAPair]
    splits: dict[str, list[QAPair]]

    @property
    def by_id(self) -> dict[str, SceneGraph]:
        return {g.image_id: g for g in self.graphs}


def build_world(ontology: Ontology, n_graphs: int, n_questions: int, seed: int,
                min_objects: int = 3, max_objects: int = 8,
                grammar: QuestionGrammar | None = None) -> World:
    if n_graphs < 1 or n_questions < 1:
        raise ValueError("n_graphs and n_questions must be positive")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(min_objects, max_objects + 1, size=n_graphs)
    graphs = [generate_scene(ontology, int(k), seed * 100003 + i) for i, k in enumerate(sizes)]
    pairs = generate_corpus(grammar or QuestionGrammar(), graphs, n_questions, seed, ontology)
    return World(ontology, graphs, pairs, split_by_graph(pairs, [g.image_id for g in graphs]))


def corrupt_all(graphs: Sequence[SceneGraph], spec: NoiseSpec, ontology: Ontology) -> dict[str, SceneGraph]:
    """Corrupt each graph with a per-graph seed derived from ``spec.seed`` and the image id."""
    out = {}
    for g in graphs:
        key = zlib.crc32(g.image_id.encode())
        local = NoiseSpec(spec.p_class, spec.p_attr, spec.p_drop_edge, spec.p_drop_obj,
                          seed=int(np.random.default_rng([spec.seed, key]).integers(2**31)))
        out[g.image_id] = corrupt(g, local, ontology)
    return out


def symbolic_answers(pairs: Sequence[QAPair], graphs: dict[str, SceneGraph], ontology: Ontology,
                     policy: str = LENIENT) -> list[str]:
    return [answer_of(execute(p.program, graphs[p.graph_id], policy=policy, ontology=ontology)) for p in pairs]


def accuracy(predicted: Sequence[str], gold: Sequence[str]) -> float:
    return 100.0 * sum(p == g for p, g in zip(predicted, gold)) / len(gold)


def records_for(pairs: Sequence[QAPair], predicted: Sequence[str], ontology: Ontology) -> list[PredictionRecord]:
    return [make_record(f"q{i}", p.program, pred, p.answer, ontology) for i, (p, pred) in enumerate(zip(pairs, predicted))]


def make_examples(pairs: Sequence[QAPair], symbolic_graphs: dict[str, SceneGraph],
                  features: dict[str, dict[str, np.ndarray]]) -> list[Example]:
    """Soft-path examples: execution runs on ``symbolic_graphs``; gold answers come from the pairs."""
    return [Example(p.tokens, p.program, symbolic_graphs[p.graph_id], features[p.graph_id], p.answer) for p in pairs]


def world_features(world: World, feature_dim: int, seed: int, noise_scale: float = 0.1) -> dict[str, dict[str, np.ndarray]]:
    """RoI stand-ins computed from the clean graphs: the visual signal the noisy graph was extracted from."""
    return {g.image_id: roi_features(g, feature_dim, seed, world.ontology, noise_scale, noise_seed=seed)
            for g in world.graphs}


def new_encoder(world: World, config: EncoderConfig) -> CrossModalEncoder:
    words = sorted({t for p in world.pairs for t in p.tokens})
    return CrossModalEncoder(config, words, answer_vocabulary(world.ontology))


@dataclass
class NoiseResult:
    seed: int
    symbolic: float
    soft: float
    clean_symbolic: float
    train_accuracy: float


def noise_robustness(seed: int, p: float = 0.3, n_graphs: int = 600, n_questions: int = 3000,
                     config: EncoderConfig | None = None, ontology: Ontology | None = None,
                     log: Callable | None = None) -> NoiseResult:
    """Train the soft path on corrupted graphs, then compare it with the symbolic executor on held-out corrupted graphs.

    Class and attribute labels are corrupted with probability ``p``; region
    features and gold answers come from the clean graphs.
    """
    ontology = ontology or default_ontology()
    config = config or EncoderConfig.toy(seed=seed)
    world = build_world(ontology, n_graphs, n_questions, seed)
    clean = world.by_id
    noisy = corrupt_all(world.graphs, NoiseSpec(p_class=p, p_attr=p, seed=seed), ontology)
    feats = world_features(world, config.feature_dim, seed)
    train = world.splits["train"]
    test = world.splits["test"] + world.splits["val"]

    model = new_encoder(world, config)
    result = model.train(make_examples(train, noisy, feats), log=log)
    gold = [q.answer for q in test]
    sym = symbolic_answers(test, noisy, ontology)
    soft = [model.predict(q.program, noisy[q.graph_id], q.tokens, feats[q.graph_id], ontology=ontology) for q in test]
    return NoiseResult(seed, accuracy(sym, gold), accuracy(soft, gold),
                       accuracy(symbolic_answers(test, clean, ontology), gold), result.train_accuracy[-1])
