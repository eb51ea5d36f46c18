import json
import time

import pytest

from sgvqa.cli import main, read_jsonl
from sgvqa.program import program_from_json, serialize_text
from sgvqa.scene_graph import dumps_graph, generate_scene


def write_config(path, **doc):
    base = {"n_graphs": 40, "n_questions": 120, "seed": 1}
    base.update(doc)
    path.write_text(json.dumps(base))
    return str(path)


@pytest.fixture
def run_dir(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    out = tmp_path / "run"
    assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_gen_outputs_and_headers(run_dir):
    for name in ("ontology.json", "graphs.jsonl", "corpus.jsonl", "manifest.json"):
        assert (run_dir / name).exists()
    head = json.loads((run_dir / "corpus.jsonl").read_text().splitlines()[0])["header"]
    assert head["seed"] == 1 and len(head["config_hash"]) == 16
    assert json.loads((run_dir / "manifest.json").read_text())["header"]["config_hash"] == head["config_hash"]
    assert len(read_jsonl(run_dir / "corpus.jsonl")) == 120


def test_gen_reproducible(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("corpus.jsonl", "graphs.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_rejects_empty_corpus(tmp_path):
    assert main(["gen", "--config", write_config(tmp_path / "c.json", n_questions=0), "--out", str(tmp_path)]) == 2


def test_gen_unknown_key(tmp_path):
    assert main(["gen", "--config", write_config(tmp_path / "c.json", bogus=1), "--out", str(tmp_path)]) == 2


def test_gen_generation_failure(tmp_path):
    # single-object scenes never admit a "same" question with two distinct objects
    cfg = write_config(tmp_path / "c.json", min_objects=1, max_objects=1, n_graphs=3)
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "r")]) == 3


def test_default_gen_is_fast(tmp_path):
    start = time.perf_counter()
    assert main(["gen", "--out", str(tmp_path / "d")]) == 0
    assert time.perf_counter() - start < 60


def test_engine_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("ENGINE_SEED", "77")
    cfg = write_config(tmp_path / "c.json", seed=3)
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    head = json.loads((tmp_path / "r" / "corpus.jsonl").read_text().splitlines()[0])["header"]
    assert head["seed"] == 77


def _fixture_program(run_dir, tmp_path):
    rows = read_jsonl(run_dir / "corpus.jsonl")
    row = next(r for r in rows if r["template"] == "relate_query")
    graphs = {g["image_id"]: g for g in read_jsonl(run_dir / "graphs.jsonl")}
    (tmp_path / "p.txt").write_text(serialize_text(program_from_json(row["program"])))
    (tmp_path / "g.json").write_text(json.dumps(graphs[row["graph_id"]]))
    return row


def test_exec_writes_trace(run_dir, tmp_path, capsys):
    row = _fixture_program(run_dir, tmp_path)
    code = main(["exec", "--program", str(tmp_path / "p.txt"), "--graph", str(tmp_path / "g.json"),
                 "--out", str(tmp_path / "t.jsonl")])
    assert code == 0
    assert capsys.readouterr().out.strip() == row["answer"]
    steps = read_jsonl(tmp_path / "t.jsonl")
    assert len(steps) == len(row["program"])
    assert main(["inspect-trace", str(tmp_path / "t.jsonl"), "--pretty"]) == 0
    assert "relate" in capsys.readouterr().out


def test_exec_gqa_fixture_graph(gqa_scene_doc, tmp_path, capsys):
    (tmp_path / "g.json").write_text(json.dumps(gqa_scene_doc["2370799"]))
    (tmp_path / "p.txt").write_text("Select: chair\nRelate: table, to the right of, [0]\nQuery material: [1]")
    assert main(["exec", "--program", str(tmp_path / "p.txt"), "--graph", str(tmp_path / "g.json")]) == 0
    assert capsys.readouterr().out.strip() == "wood"


def test_exec_policies(tmp_path, ontology, capsys):
    g = generate_scene(ontology, 3, 0)
    (tmp_path / "g.json").write_text(dumps_graph(g))
    (tmp_path / "p.txt").write_text("Select: giraffe\nQuery color: [0]")
    args = ["exec", "--program", str(tmp_path / "p.txt"), "--graph", str(tmp_path / "g.json")]
    assert main(args + ["--out", str(tmp_path / "t.jsonl")]) == 0
    assert capsys.readouterr().out.strip() == "unknown"
    assert read_jsonl(tmp_path / "t.jsonl")[1]["flags"]
    assert main(args + ["--policy", "strict"]) == 4


def test_exec_syntax_error(tmp_path, ontology, capsys):
    (tmp_path / "g.json").write_text(dumps_graph(generate_scene(ontology, 2, 0)))
    (tmp_path / "p.txt").write_text("Select: cup\n  !! [0]")
    assert main(["exec", "--program", str(tmp_path / "p.txt"), "--graph", str(tmp_path / "g.json")]) == 2
    assert "line 2, column 3" in capsys.readouterr().err


def test_batch_exec_and_eval(run_dir, tmp_path, capsys):
    preds = tmp_path / "pred.jsonl"
    assert main(["exec", "--out", str(preds), "--batch", str(run_dir / "corpus.jsonl"),
                 "--graphs", str(run_dir / "graphs.jsonl")]) == 0
    capsys.readouterr()
    assert main(["eval", "--predictions", str(preds), "--gold", str(run_dir / "corpus.jsonl"),
                 "--graphs", str(run_dir / "graphs.jsonl"), "--out", str(tmp_path / "rep")]) == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    assert row == ["100.00", "100.00", "100.00", "100.00", "0.00", "100.00"]
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["report"]["accuracy"] == 100.0 and "header" in report
    assert (tmp_path / "rep" / "groups.tsv").read_text().startswith("# {")


def test_eval_gold_as_predictions(run_dir, tmp_path, capsys):
    gold = read_jsonl(run_dir / "corpus.jsonl")
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"question_id": r["question_id"], "predicted": r["answer"]}) + "\n"
                             for r in gold))
    assert main(["eval", "--predictions", str(preds), "--gold", str(run_dir / "corpus.jsonl")]) == 0
    assert "0.00" in capsys.readouterr().out


def test_eval_id_mismatch(run_dir, tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text(json.dumps({"question_id": "nope", "predicted": "yes"}) + "\n")
    assert main(["eval", "--predictions", str(preds), "--gold", str(run_dir / "corpus.jsonl")]) == 2
    err = capsys.readouterr().err
    assert "q0" in err and len([l for l in err.splitlines() if l.startswith("  ")]) == 10


def test_train_parser_and_resume(run_dir, tmp_path):
    # the last update depends on the optimizer state carried over from the checkpoint
    assert main(["train", "parser", "--out", str(run_dir), "--steps", "7"]) == 0
    full = (run_dir / "parser_loss.tsv").read_text().splitlines()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert "parser_heldout" in manifest["reports"] and manifest["config"]["seed"] == 1

    other = tmp_path / "again"
    other.mkdir()
    for name in ("corpus.jsonl", "graphs.jsonl", "manifest.json", "ontology.json"):
        (other / name).write_bytes((run_dir / name).read_bytes())
    assert main(["train", "parser", "--out", str(other), "--steps", "5"]) == 0
    assert main(["train", "parser", "--out", str(other), "--steps", "2", "--resume", str(other / "parser.sgw")]) == 0
    resumed = (other / "parser_loss.tsv").read_text().splitlines()
    assert resumed[-2:] == full[-2:]
    assert resumed[-1].startswith("7\t")


def test_train_encoder_and_resume(run_dir, tmp_path, capsys):
    other = tmp_path / "again"
    other.mkdir()
    for name in ("corpus.jsonl", "graphs.jsonl", "manifest.json", "ontology.json"):
        (other / name).write_bytes((run_dir / name).read_bytes())
    assert main(["train", "encoder", "--out", str(run_dir), "--steps", "2"]) == 0
    assert "held-out answer accuracy" in capsys.readouterr().out
    full = (run_dir / "encoder_loss.tsv").read_text().splitlines()[2:]
    assert main(["train", "encoder", "--out", str(other), "--steps", "1"]) == 0
    assert main(["train", "encoder", "--out", str(other), "--steps", "1", "--resume", str(other / "encoder.sgw")]) == 0
    resumed = (other / "encoder_loss.tsv").read_text().splitlines()[2:]
    assert resumed == full[len(full) - len(resumed):]
    assert resumed[0].split("\t")[0] == str(len(full) - len(resumed) + 1)


def test_train_missing_corpus(tmp_path):
    assert main(["train", "parser", "--out", str(tmp_path / "empty")]) == 2


def test_train_non_finite(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", parser={"learning_rate": 1e308, "optimizer": "sgd", "clip": None})
    out = tmp_path / "run"
    assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
    with pytest.warns(RuntimeWarning):
        assert main(["train", "parser", "--config", cfg, "--out", str(out), "--steps", "5"]) == 5
