"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line and records it for the terminal summary.
"""
import time

import numpy as np

import oracle
from sgvqa.encoder import CrossModalEncoder, EncoderConfig, Example, answer_vocabulary, grad_check as encoder_grad_check
from sgvqa.executor import LENIENT, ObjList, execute
from sgvqa.grammar import random_program
from sgvqa.metrics import format_report, round_half_up, score
from sgvqa.parser import ParserConfig, Seq2SeqParser, grad_check as parser_grad_check, program_accuracy
from sgvqa.pipeline import accuracy, build_world, noise_robustness, records_for, symbolic_answers
from sgvqa.program import program_to_json, selected_layout
from sgvqa.scene_graph import NoiseSpec, corrupt, generate_scene, graph_to_json, roi_features

from conftest import ACCEPTANCE, PARSER_STEPS


def report(n, name, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def test_1_executor_matches_oracle(ontology):
    start = time.perf_counter()
    bad = longest = biggest = 0
    for k in range(10_000):
        rng = np.random.default_rng([1, k])
        g = generate_scene(ontology, int(rng.integers(1, 9)), 50_000 + k)
        if k % 3 == 0:
            g = corrupt(g, NoiseSpec(0.2, 0.2, 0.3, 0.1, seed=k), ontology)
            if not g.objects:
                g = generate_scene(ontology, 1, 50_000 + k)
        p = random_program(rng, ontology, g)
        longest, biggest = max(longest, len(p)), max(biggest, len(g.objects))
        t = execute(p, g, policy=LENIENT, ontology=ontology)
        outs, att = oracle.run(graph_to_json(g), program_to_json(p))
        got = [list(s.output.ids) if isinstance(s.output, ObjList) else s.output.value for s in t.steps]
        bad += got != outs or [[a[0] for a in s.attention] for s in t.steps] != att
    secs = time.perf_counter() - start
    ok = bad == 0 and longest <= 6 and biggest <= 8 and secs < 120
    report(1, "executor agrees with oracle", ok,
           f"{bad} disagreements / 10000, max {biggest} objects, max {longest} functions, {secs:.1f}s")


def test_2_symbolic_accuracy_on_clean_graphs(ontology):
    start = time.perf_counter()
    world = build_world(ontology, n_graphs=1000, n_questions=5000, seed=2)
    pred = symbolic_answers(world.pairs, world.by_id, ontology)
    acc = accuracy(pred, [q.answer for q in world.pairs])
    secs = time.perf_counter() - start
    report(2, "symbolic accuracy on clean graphs", acc == 100.0 and len(pred) >= 5000 and secs < 120,
           f"{acc:.2f}% on {len(pred)} questions, {secs:.1f}s")


def test_3_parser_toy_scale(trained_parser, parser_world):
    model, result, secs = trained_parser
    acc = program_accuracy(model, parser_world.splits["test"])
    templates = {q.template for q in parser_world.pairs}
    ok = (acc["operation"] >= 0.99 and acc["argument"] >= 0.95 and acc["function"] >= 0.95
          and len(templates) >= 5 and len(parser_world.pairs) == 2000 and model.config.hidden_dim == 32
          and PARSER_STEPS <= 20_000 and secs < 900)
    report(3, "parser held-out accuracy", ok,
           f"operation {acc['operation']:.4f}, argument {acc['argument']:.4f}, function {acc['function']:.4f}, "
           f"{len(templates)} templates, {PARSER_STEPS} steps, {secs:.0f}s")


def test_4_gradient_checks(small_world, ontology):
    from sgvqa.grammar import QuestionGrammar, generate_corpus

    start = time.perf_counter()
    pairs = generate_corpus(QuestionGrammar(), small_world, 60, 4, ontology)
    rng = np.random.default_rng(4)
    chosen = [pairs[int(i)] for i in rng.choice(len(pairs), size=10, replace=False)]

    parser = Seq2SeqParser.from_corpus(pairs, ParserConfig.toy(seed=4))
    p_err = max(max(parser_grad_check(parser, [q], seed=i, entries_per_block=5).values())
                for i, q in enumerate(chosen))

    cfg = EncoderConfig.toy(seed=4)
    encoder = CrossModalEncoder(cfg, sorted({t for q in pairs for t in q.tokens}), answer_vocabulary(ontology))
    graphs = {g.image_id: g for g in small_world}
    e_err = 0.0
    for i, q in enumerate(chosen):
        feats = roi_features(graphs[q.graph_id], cfg.feature_dim, 4, ontology)
        ex = Example(q.tokens, q.program, graphs[q.graph_id], feats, q.answer)
        e_err = max(e_err, max(encoder_grad_check(encoder, ex, seed=i, entries_per_block=2).values()))
    secs = time.perf_counter() - start
    report(4, "gradient checks in double precision", p_err < 1e-5 and e_err < 1e-5 and secs < 120,
           f"parser max rel err {p_err:.2e}, encoder max rel err {e_err:.2e}, 10 samples each, {secs:.1f}s")


def test_5_encoder_structure(ontology):
    cfg = EncoderConfig.toy(seed=5)
    model = CrossModalEncoder(cfg, ["is", "there", "a", "cup", "?"], answer_vocabulary(ontology))
    rng = np.random.default_rng(5)
    row_err = mean_err = var_err = 0.0
    for _ in range(10):
        V = rng.standard_normal((int(rng.integers(1, 9)), cfg.dim))
        L = rng.standard_normal((int(rng.integers(1, 12)), cfg.dim))
        rec = []
        model.encode(V, L, record=rec)
        for kind, _, x in rec:
            if kind == "attn":
                row_err = max(row_err, float(np.abs(x.sum(-1) - 1).max()))
            else:
                mean_err = max(mean_err, float(np.abs(x.mean(-1)).max()))
                var_err = max(var_err, float(np.abs(x.var(-1) - 1).max()))
    rec = []
    model.embed_question(["is", "there", "a", "cup", "?"], record=rec)
    q_var = max(float(np.abs(x.var(-1) - 1).max()) for _, _, x in rec)

    violations = 0
    V = rng.standard_normal((7, cfg.dim))
    L = rng.standard_normal((6, cfg.dim))
    V_out, L_out = model.encode(V, L)
    for _ in range(100):
        perm = rng.permutation(len(V))
        Vp, Lp = model.encode(V[perm], L)
        violations += not (np.allclose(Vp, V_out[perm], atol=1e-10) and np.allclose(Lp, L_out, atol=1e-10))
    ok = row_err < 1e-6 and mean_err < 1e-6 and var_err < 1e-4 and q_var < 1e-5 and violations == 0
    report(5, "encoder attention, layer norm and permutation structure", ok,
           f"row sum err {row_err:.1e}, ln |mean| {mean_err:.1e}, ln |var-1| {var_err:.1e}, "
           f"question ln |var-1| {q_var:.1e}, {violations} permutation violations / 100")


def test_6_layout_follows_symbolic_attention(ontology):
    cfg = EncoderConfig.toy(seed=6)
    model = CrossModalEncoder(cfg, ["what", "is", "this", "?"], answer_vocabulary(ontology))
    rng = np.random.default_rng(6)
    bad = 0
    for k in range(1000):
        g = generate_scene(ontology, int(rng.integers(1, 9)), 70_000 + k)
        p = random_program(rng, ontology, g)
        feats = roi_features(g, cfg.feature_dim, 6, ontology)
        res = model.run_layout(p, g, ["what", "is", "this", "?"], feats, ontology=ontology)
        sym = execute(p, g, policy=LENIENT, ontology=ontology)
        layout = selected_layout(p)
        ok = res.encode_calls == len(layout) + 1 and res.trace[0]["object_ids"] == list(g.objects)
        for rec, f in zip(res.trace[1:], layout):
            want = [a[0] for a in sym.steps[f.index].attention]
            # an empty selection keeps the previous set and is flagged
            ok &= rec["object_ids"] == want if want else rec["fallback"]
        bad += not ok
    report(6, "layout attends to symbolic object sets", bad == 0, f"{bad} mismatches / 1000 programs")


def test_7_metric_identities(ontology):
    world = build_world(ontology, n_graphs=100, n_questions=500, seed=7)
    gold = [q.answer for q in world.pairs]
    r = score(records_for(world.pairs, gold, ontology))
    from sgvqa.metrics import PredictionRecord

    scope = frozenset("ab")
    hand = [PredictionRecord(str(i), "a", g, ("query", "color", "cup"), scope, False) for i, g in enumerate("aabb")]
    tv = round_half_up(score(hand).distribution)
    ok = (r.accuracy, r.validity, r.distribution) == (100.0, 100.0, 0.0) and tv == "50.00"
    report(7, "metric identities", ok,
           f"gold as predictions: {format_report(r).splitlines()[1].split()}, total variation example {tv}")


def test_8_soft_path_beats_symbolic_under_noise():
    start = time.perf_counter()
    results = [noise_robustness(seed, p=0.3) for seed in (0, 1, 2)]
    soft = float(np.mean([r.soft for r in results]))
    sym = float(np.mean([r.symbolic for r in results]))
    secs = time.perf_counter() - start
    per_seed = ", ".join(f"seed {r.seed}: soft {r.soft:.1f} vs symbolic {r.symbolic:.1f}" for r in results)
    report(8, "soft path under p=0.3 noise", soft >= sym and secs < 1800,
           f"mean soft {soft:.2f} vs symbolic {sym:.2f}; {per_seed}; {secs:.0f}s")
