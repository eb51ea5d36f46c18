"""Command-line harness: gen, exec, train, eval, inspect-trace.

Exit codes: 0 ok, 2 configuration or input error, 3 generation failure,
4 execution failure, 5 training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import __version__
from .encoder import CrossModalEncoder, EncoderConfig, answer_vocabulary
from .executor import LENIENT, STRICT, ExecError, answer_of, execute
from .grammar import ExhaustedTemplates, QAPair, corpus_hash, tokenize
from .metrics import EmptyInput, format_report, group_distribution, make_record, plausibility_from_graphs, score
from .nn import NonFiniteLoss
from .parser import ParseFailure, ParserConfig, Seq2SeqParser, program_accuracy
from .pipeline import build_world, corrupt_all, make_examples
from .program import ProgramError, ProgramSyntaxError, parse_program_text, program_from_json
from .scene_graph import (
    NoiseSpec,
    Ontology,
    PlacementFailure,
    SceneGraph,
    default_ontology,
    dumps_graph,
    graph_from_json,
    read_any_graph,
    roi_features,
)

EXIT_OK, EXIT_CONFIG, EXIT_GEN, EXIT_EXEC, EXIT_TRAIN = 0, 2, 3, 4, 5


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    ontology: str | None = None
    n_graphs: int = 500
    n_questions: int = 2000
    min_objects: int = 3
    max_objects: int = 8
    policy: str = LENIENT
    noise: dict = field(default_factory=dict)
    parser: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)

    def validate(self):
        if self.n_graphs < 1 or self.n_questions < 1:
            raise ConfigError("n_graphs and n_questions must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.policy not in (STRICT, LENIENT):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.ontology and not Path(self.ontology).is_file():
            raise ConfigError(f"ontology file {self.ontology} not found")
        try:
            self.noise_spec()
            self.parser_config()
            self.encoder_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(**{"seed": self.seed, **self.noise})

    def parser_config(self) -> ParserConfig:
        return ParserConfig.toy(**{"seed": self.seed, **self.parser})

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.toy(**{"seed": self.seed, **self.encoder})

    def load_ontology(self) -> Ontology:
        if self.ontology:
            return Ontology.from_json(json.loads(Path(self.ontology).read_text()))
        return default_ontology()

    def digest(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        doc = {k: v for k, v in asdict(self).items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    doc: dict[str, Any] = {}
    manifest = Path(out) / "manifest.json" if out else None
    if not path and manifest is not None and manifest.is_file():
        # later stages of a run reuse the configuration recorded by gen
        doc = dict(json.loads(manifest.read_text()).get("config", {}))
    elif path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(**doc)
    if seed is not None:
        cfg.seed = seed
    if os.environ.get("ENGINE_SEED"):
        cfg.seed = int(os.environ["ENGINE_SEED"])
        for section in (cfg.noise, cfg.parser, cfg.encoder):
            section.pop("seed", None)
    if out:
        cfg.out_dir = out
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# artifact files: every file starts with a header carrying config hash and seed


def header(cfg: RunConfig, kind: str) -> dict:
    return {"kind": kind, "config_hash": cfg.digest(), "seed": cfg.seed, "version": __version__}


def write_jsonl(path: Path, head: dict, rows) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": head}, sort_keys=True) + "\n")
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            doc = json.loads(line)
            if "header" not in doc:
                rows.append(doc)
    return rows


def write_json(path: Path, head: dict, body: dict) -> None:
    Path(path).write_text(json.dumps({"header": head, **body}, indent=2, sort_keys=True) + "\n")


def update_manifest(cfg: RunConfig, **entries) -> None:
    out = Path(cfg.out_dir)
    path = out / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc.pop("header", None)
    doc.setdefault("artifacts", {})
    doc.setdefault("reports", {})
    for k, v in entries.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k].update(v)
        else:
            doc[k] = v
    doc["config"] = {k: v for k, v in asdict(cfg).items() if k != "out_dir"}
    write_json(path, header(cfg, "manifest"), doc)


def load_graphs(path) -> dict[str, SceneGraph]:
    return {d["image_id"]: graph_from_json(d) for d in read_jsonl(path)}


def load_pairs(path) -> list[tuple[str, QAPair]]:
    return [(d["question_id"], QAPair.from_json(d)) for d in read_jsonl(path)]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    ontology = cfg.load_ontology()
    try:
        world = build_world(ontology, cfg.n_graphs, cfg.n_questions, cfg.seed, cfg.min_objects, cfg.max_objects)
    except (ExhaustedTemplates, PlacementFailure) as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_GEN
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {id(p): name for name, ps in world.splits.items() for p in ps}
    write_json(out / "ontology.json", header(cfg, "ontology"), {"ontology": ontology.to_json()})
    write_jsonl(out / "graphs.jsonl", header(cfg, "graphs"), (json.loads(dumps_graph(g)) for g in world.graphs))
    write_jsonl(out / "corpus.jsonl", header(cfg, "corpus"),
                ({"question_id": f"q{i}", "split": split_of[id(p)], **p.to_json()} for i, p in enumerate(world.pairs)))
    digest = corpus_hash(world.pairs)
    update_manifest(cfg, artifacts={"ontology": "ontology.json", "graphs": "graphs.jsonl", "corpus": "corpus.jsonl"},
                    corpus_hash=digest, splits={k: len(v) for k, v in world.splits.items()})
    print(f"wrote {len(world.graphs)} graphs and {len(world.pairs)} questions to {out} (corpus {digest[:12]})")
    return EXIT_OK


def _read_program(path: str):
    text = Path(path).read_text()
    if path.endswith(".json"):
        return program_from_json(json.loads(text))
    return parse_program_text(text)


def _read_graph(path: str, ontology: Ontology) -> SceneGraph:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "header" in doc and "graph" in doc:
        doc = doc["graph"]
    return read_any_graph(doc, ontology)


def cmd_exec(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    ontology = cfg.load_ontology()
    policy = args.policy or cfg.policy
    if args.batch:
        return _exec_batch(args, cfg, ontology, policy)
    if not args.graph or not (args.program or args.question):
        print("exec needs --graph and one of --program / --question", file=sys.stderr)
        return EXIT_CONFIG
    try:
        graph = _read_graph(args.graph, ontology)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read graph: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.program:
            program = _read_program(args.program)
        else:
            if not args.parser:
                print("--question needs --parser weights", file=sys.stderr)
                return EXIT_CONFIG
            program = Seq2SeqParser.load(args.parser).predict_program(tokenize(args.question))
    except ProgramSyntaxError as exc:
        print(f"SyntaxError at line {exc.line}, column {exc.column}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseFailure as exc:
        print(f"ParseFailure: {exc}", file=sys.stderr)
        return EXIT_EXEC
    except ProgramError as exc:
        print(f"invalid program: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        trace = execute(program, graph, policy=policy, ontology=ontology)
    except ExecError as exc:
        print(f"ExecError: {exc}", file=sys.stderr)
        return EXIT_EXEC
    print(trace.pretty() if args.pretty else answer_of(trace))
    if args.out:
        Path(args.out).write_text(json.dumps({"header": header(cfg, "trace")}) + "\n" + trace.to_jsonl())
    return EXIT_OK


def _exec_batch(args, cfg: RunConfig, ontology: Ontology, policy: str) -> int:
    root = Path(cfg.out_dir)
    graphs_path = Path(args.graphs) if args.graphs else root / "graphs.jsonl"
    if not Path(args.batch).is_file() or not graphs_path.is_file():
        print("batch exec needs an existing question file and graph file", file=sys.stderr)
        return EXIT_CONFIG
    graphs = load_graphs(graphs_path)
    pairs = load_pairs(args.batch)
    if args.noise:
        graphs = corrupt_all(list(graphs.values()), cfg.noise_spec(), ontology)
    rows = []
    for qid, p in pairs:
        try:
            trace = execute(p.program, graphs[p.graph_id], policy=policy, ontology=ontology)
        except ExecError as exc:
            print(f"ExecError on {qid}: {exc}", file=sys.stderr)
            return EXIT_EXEC
        rows.append({"question_id": qid, "predicted": answer_of(trace)})
    out = Path(args.out) if args.out else root / "predictions.jsonl"
    write_jsonl(out, header(cfg, "predictions"), rows)
    print(f"wrote {len(rows)} predictions to {out}")
    return EXIT_OK


def _corpus(cfg: RunConfig):
    root = Path(cfg.out_dir)
    if not (root / "corpus.jsonl").is_file() or not (root / "graphs.jsonl").is_file():
        raise ConfigError(f"no corpus under {root}; run gen first")
    rows = read_jsonl(root / "corpus.jsonl")
    splits: dict[str, list[QAPair]] = {"train": [], "val": [], "test": []}
    for d in rows:
        splits[d.get("split", "train")].append(QAPair.from_json(d))
    return splits, load_graphs(root / "graphs.jsonl")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    splits, graphs = _corpus(cfg)
    root = Path(cfg.out_dir)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    try:
        if args.component == "parser":
            pcfg = cfg.parser_config()
            if args.resume:
                model = Seq2SeqParser.load(args.resume)
            else:
                model = Seq2SeqParser.from_corpus(splits["train"], pcfg)
            res = model.train(splits["train"], steps=args.steps, eval_pairs=splits["val"], log=log)
            losses = res.losses
            first_update = model.step - len(losses) + 1
            acc = program_accuracy(model, splits["test"] or splits["val"])
            weights = root / "parser.sgw"
        else:
            ecfg = cfg.encoder_config()
            ontology = cfg.load_ontology()
            if args.resume:
                model = CrossModalEncoder.load(args.resume)
            else:
                words = sorted({t for ps in splits.values() for p in ps for t in p.tokens})
                model = CrossModalEncoder(ecfg, words, answer_vocabulary(ontology))
            symbolic = corrupt_all(list(graphs.values()), cfg.noise_spec(), ontology)
            feats = {gid: roi_features(g, model.config.feature_dim, cfg.seed, ontology, noise_seed=cfg.seed)
                     for gid, g in graphs.items()}
            res = model.train(make_examples(splits["train"], symbolic, feats), epochs=args.steps, log=log)
            losses = res.losses
            per_epoch = -(-len(splits["train"]) // model.config.batch_size)
            first_update = per_epoch * (model.epoch - len(res.train_accuracy)) + 1
            test = splits["test"] or splits["val"]
            hits = sum(model.predict(p.program, symbolic[p.graph_id], p.tokens, feats[p.graph_id], ontology=ontology)
                       == p.answer for p in test)
            acc = {"answer": hits / len(test)}
            weights = root / "encoder.sgw"
    except NonFiniteLoss as exc:
        print(f"NonFiniteLoss: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    model.save(weights, {"header": header(cfg, f"{args.component}-weights")})
    curve = root / f"{args.component}_loss.tsv"
    with open(curve, "w") as fh:
        fh.write(f"# {json.dumps(header(cfg, 'loss-curve'), sort_keys=True)}\n")
        fh.write("update\tloss\n")
        for k, l in enumerate(losses):
            fh.write(f"{first_update + k}\t{l:.10g}\n")
    update_manifest(cfg, artifacts={f"{args.component}_weights": weights.name, f"{args.component}_curve": curve.name},
                    reports={f"{args.component}_heldout": acc})
    for k, v in acc.items():
        print(f"held-out {k} accuracy: {100 * v:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed, None)
    ontology = cfg.load_ontology()
    preds = {d["question_id"]: d["predicted"] for d in read_jsonl(args.predictions)}
    gold = read_jsonl(args.gold)
    missing = [d["question_id"] for d in gold if d["question_id"] not in preds]
    extra = sorted(set(preds) - {d["question_id"] for d in gold})
    if missing or extra:
        print(f"id mismatch: {len(missing)} gold ids without a prediction, {len(extra)} unknown predictions",
              file=sys.stderr)
        for qid in (missing + extra)[:10]:
            print(f"  {qid}", file=sys.stderr)
        return EXIT_CONFIG
    records = []
    for d in gold:
        program = program_from_json(d["program"])
        records.append(make_record(d["question_id"], program, preds[d["question_id"]], d["answer"], ontology))
    graphs_path = Path(args.graphs) if args.graphs else Path(cfg.out_dir) / "graphs.jsonl"
    table = plausibility_from_graphs(load_graphs(graphs_path).values()) if graphs_path.is_file() else frozenset()
    try:
        report = score(records, table)
    except EmptyInput as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    text = format_report(report)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        head = header(cfg, "report")
        (out / "report.txt").write_text(f"# {json.dumps(head, sort_keys=True)}\n{text}\n")
        write_json(out / "report.json", head, {"report": report.to_json()})
        with open(out / "groups.tsv", "w") as fh:
            fh.write(f"# {json.dumps(head, sort_keys=True)}\n")
            fh.write("operation\tcategory\thead\tdistribution\n")
            for (op, cat, arg), v in group_distribution(records).items():
                fh.write(f"{op}\t{cat}\t{arg}\t{v:.4f}\n")
    return EXIT_OK


def _pretty_rows(rows: list[dict]) -> str:
    lines = []
    for r in rows:
        args = ", ".join(r["args"])
        deps = " ".join(f"[{d}]" for d in r["deps"])
        lines.append(f"{r['idx']}. {r['op']}: {args} {deps}".rstrip())
        out = r["out"]
        if isinstance(out, list):
            out = "{" + ", ".join(out) + "}"
        lines.append(f"     -> {out}")
        if r["attention"]:
            lines.append("     attends " + ", ".join(a[0] for a in r["attention"]))
        for fl in r["flags"]:
            lines.append(f"     ! {fl}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        rows = read_jsonl(args.trace)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.pretty:
        print(_pretty_rows(rows))
    else:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgvqa", description="Scene-graph question answering engine")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate scene graphs and a QA corpus")
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("exec", parents=[common], help="execute a program on a scene graph")
    e.add_argument("--program", help="program file (text format, or .json)")
    e.add_argument("--question", help="question text, parsed with --parser")
    e.add_argument("--parser", help="trained parser weights")
    e.add_argument("--graph", help="scene graph JSON (canonical or GQA format)")
    e.add_argument("--batch", help="corpus JSON lines to execute in batch")
    e.add_argument("--graphs", help="graph JSON lines for batch mode")
    e.add_argument("--noise", action="store_true", help="batch mode: corrupt graphs with the config noise spec")
    e.add_argument("--policy", choices=[STRICT, LENIENT])
    e.add_argument("--pretty", action="store_true", help="print a step-by-step listing")
    e.add_argument("--out", help="trace (single) or predictions (batch) output file")
    e.set_defaults(func=cmd_exec)

    t = sub.add_parser("train", parents=[common], help="train the parser or the encoder")
    t.add_argument("component", choices=["parser", "encoder"])
    t.add_argument("--out", help="run directory holding the corpus")
    t.add_argument("--steps", type=int, help="parser updates or encoder epochs")
    t.add_argument("--resume", help="weights to continue from")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", parents=[common], help="score predictions against gold answers")
    v.add_argument("--predictions", required=True)
    v.add_argument("--gold", required=True)
    v.add_argument("--graphs", help="gold graphs for the plausibility table")
    v.add_argument("--out", help="report directory")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-trace", help="render a JSON-lines trace")
    i.add_argument("trace")
    i.add_argument("--pretty", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
