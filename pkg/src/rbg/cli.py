"""Command-line entry point: one subcommand per pipeline stage.

Every run writes its primary output plus ``<output>.manifest.json`` holding
the command, resolved configuration, input hashes, seed, output paths and
timestamps. Errors are printed to stderr as one JSON object.
Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import torch

from . import __version__, plots
from .corpus import Question, build_vocabulary, load_corpus, load_questions, read_jsonl, tokenize_words, write_jsonl
from .evaluation import FaithfulnessRecord, evaluate, faithfulness_recall, fine_grained_report, render_table
from .model import ModelConfig, RBGModel, param_hash, seeded_rng
from .pretraining import MASK_RATE, RarExample, SentenceFilter, build_rar_examples, pretrain
from .retrieval import (Bm25Index, DenseIndex, RetrievedSet, bm25_retrieve, build_dense_index, embed, query_ids,
                        random_retrieve, retrieve_top_k)
from .training import VARIANTS, TrainConfig, TrainState, ablate, predict, train

log = logging.getLogger("rbg")

FIXTURE_FILES = ("fixture_corpus.jsonl", "fixture_train.jsonl", "fixture_valid.jsonl", "fixture_extractive.jsonl")


class CliError(Exception):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


# ---------------------------------------------------------------- helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing file", str(p))
    return p


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


class Run:
    """Collects inputs and outputs of one invocation and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.seed = args.seed
        self.config: dict = {}
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def input(self, path) -> Path:
        p = _need(path)
        self.inputs[str(p)] = _sha256(p)
        return p

    def output(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p))
        return p

    def finish(self, primary) -> Path:
        path = Path(str(primary) + ".manifest.json")
        _json_dump(path, {"command": self.command, "version": __version__, "config": self.config,
                          "inputs": self.inputs, "seed": self.seed, "outputs": self.outputs,
                          "started": self.started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        return path


def _corpus(run: Run, path):
    docs = load_corpus(run.input(path))
    return docs, {d.doc_id: d for d in docs}


def _questions(run: Run, path, by_id=None) -> list[Question]:
    return load_questions(run.input(path), set(by_id) if by_id is not None else None)


def _retrievals(run: Run, path) -> dict[str, RetrievedSet]:
    return {rs.q_id: rs for rs in (RetrievedSet.from_json(o) for o in read_jsonl(run.input(path)))}


def _docs_for(questions, retrievals, by_id, k: int):
    out = {}
    for q in questions:
        if q.q_id not in retrievals:
            raise CliError(f"no retrieval for question {q.q_id!r}")
        ids = retrievals[q.q_id].doc_ids[:k]
        missing = [d for d in ids if d not in by_id]
        if missing:
            raise CliError(f"retrieved ids not in corpus: {missing}")
        if not ids:
            raise CliError(f"empty retrieval for question {q.q_id!r}")
        out[q.q_id] = [by_id[d] for d in ids]
    return out


def _dense_docs_for(model: RBGModel, questions, docs, by_id, k: int):
    """Retrieve with the checkpoint's own retriever when no retrieval file is given."""
    model.eval()
    with torch.no_grad():
        index = build_dense_index(model.retriever, docs, model.vocab, _model_hash(model))
        out = {}
        for q in questions:
            vec = embed(model.retriever.query_encoder, query_ids(q.text, model.vocab, model.retriever.max_positions))
            out[q.q_id] = [by_id[d] for d in retrieve_top_k(index, vec, min(k, len(index)), q.q_id).doc_ids]
    return out


def _load_model(run: Run, path) -> RBGModel:
    return RBGModel.load(run.input(path))


def _train_config(args, **extra) -> TrainConfig:
    base = TrainConfig.from_file(_need(args.config)) if args.config else TrainConfig()
    overrides = {"seed": args.seed, **extra}
    for name in ("lr", "batch_size", "max_steps", "eval_interval", "k", "generator_warmup", "eval_beam",
                 "eval_max_target", "weight_decay"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    return base.replace(**overrides)


# ---------------------------------------------------------------- subcommands


def cmd_fixture(args) -> Path:
    run = Run("fixture", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = resources.files("rbg") / "data"
    for name in FIXTURE_FILES:
        with resources.as_file(src / name) as p:
            shutil.copyfile(p, run.output(out / name))
    run.finish(out / "fixture")
    return out


def cmd_index(args) -> Path:
    run = Run("index", args)
    docs, by_id = _corpus(run, args.corpus)
    out = run.output(args.out)
    if args.mode == "bm25":
        index = Bm25Index.build(docs, args.k1, args.b)
        index.save(out)
        run.config = {"mode": "bm25", "k1": args.k1, "b": args.b}
    else:
        if args.checkpoint:
            model = _load_model(run, args.checkpoint)
        else:
            questions = [q for path in args.questions for q in _questions(run, path, by_id)]
            vocab = build_vocabulary(docs, questions, args.min_count)
            mcfg = ModelConfig.from_dict({**(json.loads(_need(args.model_config).read_text())
                                             if args.model_config else {}), "seed": args.seed})
            model = RBGModel(vocab, mcfg)
            ckpt = run.output(args.model_out or str(out) + ".model.pt")
            model.save(ckpt, {"stage": "init"})
        model.eval()
        with torch.no_grad():
            index = build_dense_index(model.retriever, docs, model.vocab, _model_hash(model))
        index.save(out)
        run.config = {"mode": "dense", "model": asdict(model.config), "vocab_size": len(model.vocab)}
    run.finish(out)
    return out


def _model_hash(model: RBGModel) -> str:
    return param_hash(model.retriever)


def cmd_retrieve(args) -> Path:
    run = Run("retrieve", args)
    docs, by_id = _corpus(run, args.corpus)
    questions = _questions(run, args.questions, by_id)
    out = run.output(args.out)
    rows = []
    if args.mode == "random":
        ids = sorted(by_id)
        for q in questions:
            seed = int(seeded_rng(args.seed, f"random-retrieval/{q.q_id}").integers(2**31))
            rows.append(random_retrieve(ids, args.k, seed, q.q_id))
    elif args.mode == "bm25":
        index = Bm25Index.load(run.input(args.index))
        rows = [bm25_retrieve(index, tokenize_words(q.text), args.k, q_id=q.q_id) for q in questions]
    else:
        if not args.checkpoint:
            raise CliError("dense retrieval needs --checkpoint")
        index = DenseIndex.load(run.input(args.index))
        model = _load_model(run, args.checkpoint)
        if index.encoder_hash != _model_hash(model):
            raise CliError("index was built with a different retriever", args.index)
        model.eval()
        with torch.no_grad():
            for q in questions:
                vec = embed(model.retriever.query_encoder,
                            query_ids(q.text, model.vocab, model.retriever.max_positions))
                rows.append(retrieve_top_k(index, vec, args.k, q.q_id))
    write_jsonl(out, [r.to_json() for r in rows])
    run.config = {"mode": args.mode, "k": args.k}
    run.finish(out)
    return out


def cmd_pretrain_build(args) -> Path:
    run = Run("pretrain-build", args)
    docs, _ = _corpus(run, args.corpus)
    vocab = _load_model(run, args.checkpoint).vocab if args.checkpoint else build_vocabulary(docs)
    index = Bm25Index.load(run.input(args.bm25)) if args.bm25 else Bm25Index.build(docs)
    filt = SentenceFilter(args.min_length, not args.no_capitalized)
    seed = int(seeded_rng(args.seed, "rar-build").integers(2**31))
    examples = build_rar_examples(docs, index, vocab, filt, args.k, args.n, seed, args.mask_rate)
    out = run.output(args.out)
    write_jsonl(out, [ex.to_json(vocab) for ex in examples])
    run.config = {"k": args.k, "n": args.n, "mask_rate": args.mask_rate, "filter": asdict(filt)}
    run.finish(out)
    return out


def cmd_pretrain(args) -> Path:
    run = Run("pretrain", args)
    _, by_id = _corpus(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    examples = [RarExample.from_json(o, model.vocab) for o in read_jsonl(run.input(args.examples))]
    torch.manual_seed(args.seed)
    seed = int(seeded_rng(args.seed, "pretrain").integers(2**31))
    losses = pretrain(model, examples, by_id, args.steps, args.lr, args.weight_decay, args.batch_size, seed,
                      generator_warmup=args.generator_warmup, log_every=args.log_every)
    out = run.output(args.out)
    model.save(out, {"stage": "pretrain", "steps": args.steps})
    _json_dump(run.output(str(out) + ".losses.json"), losses)
    plots.plot_losses({"pretrain": losses}, run.output(str(out) + ".losses.png"))
    run.config = {"steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
                  "weight_decay": args.weight_decay, "generator_warmup": args.generator_warmup}
    run.finish(out)
    return out


def cmd_train(args) -> Path:
    run = Run("train", args)
    _, by_id = _corpus(run, args.corpus)
    cfg = _train_config(args, no_reader=args.no_reader, reader_frozen=args.reader_frozen,
                        init_checkpoint=args.checkpoint)
    model = _load_model(run, args.checkpoint)
    train_q = _questions(run, args.train, by_id)
    valid_q = _questions(run, args.valid, by_id) if args.valid else []
    retrievals = _retrievals(run, args.retrievals)
    docs_for = _docs_for(train_q + valid_q, retrievals, by_id, cfg.k)
    out = run.output(args.out)
    state = TrainState.load(run.input(args.resume)) if args.resume else None
    log_path = run.output(str(out) + ".log.jsonl")
    if not args.resume and log_path.exists():
        log_path.unlink()
    result = train(cfg, model, train_q, docs_for, valid_q, state, log_path, out.parent)
    model.save(out, {"stage": "train", "step": result.state.step, "best_step": result.state.best_step,
                     "best_valid_rouge_l": result.best_metric})
    result.state.save(run.output(str(out) + ".state.pt"))
    losses = [h["loss"] for h in result.state.history]
    plots.plot_losses({"train": losses}, run.output(str(out) + ".losses.png"))
    run.config = asdict(cfg)
    run.finish(out)
    return out


def cmd_generate(args) -> Path:
    run = Run("generate", args)
    docs, by_id = _corpus(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    questions = _questions(run, args.questions, by_id)
    docs_for = (_docs_for(questions, _retrievals(run, args.retrievals), by_id, args.k) if args.retrievals
                else _dense_docs_for(model, questions, docs, by_id, args.k))
    torch.manual_seed(args.seed)
    preds = predict(model, questions, docs_for, args.beam, args.max_target, not args.no_reader)
    out = run.output(args.out)
    write_jsonl(out, [{"id": q.q_id, "answer": preds[q.q_id]} for q in questions])
    run.config = {"beam": args.beam, "max_target": args.max_target, "k": args.k, "no_reader": args.no_reader}
    run.finish(out)
    return out


def _predictions(run: Run, path) -> dict[str, str]:
    preds = {}
    for o in read_jsonl(run.input(path)):
        if "answer" in o:
            preds[str(o["id"])] = o["answer"]
        elif o.get("answers"):
            # a gold file doubles as a prediction file
            preds[str(o["id"])] = o["answers"][0]
        else:
            raise CliError(f"prediction row {o.get('id')!r} has no answer", str(path))
    return preds


def cmd_evaluate(args) -> Path:
    run = Run("evaluate", args)
    by_id = None
    if args.corpus:
        _, by_id = _corpus(run, args.corpus)
    questions = _questions(run, args.questions, by_id)
    retrievals = _retrievals(run, args.retrievals) if args.retrievals else None
    report = evaluate(_predictions(run, args.predictions), questions, retrievals, by_id, args.overlap_n)
    fine_grained_report(report, args.score_thresholds, args.overlap_thresholds)
    out = run.output(args.out)
    _json_dump(out, report.to_json())
    table = render_table(report)
    run.output(str(out) + ".txt").write_text(table, encoding="utf-8")
    plots.plot_bins(report.bins, run.output(str(out) + ".bins.png"))
    sys.stdout.write(table)
    run.config = {"overlap_n": args.overlap_n, "score_thresholds": args.score_thresholds,
                  "overlap_thresholds": args.overlap_thresholds}
    run.finish(out)
    return out


def cmd_ablate(args) -> Path:
    run = Run("ablate", args)
    _, by_id = _corpus(run, args.corpus)
    base = _load_model(run, args.checkpoint)
    cfg = _train_config(args, init_checkpoint=args.checkpoint)
    train_q = _questions(run, args.train, by_id)
    valid_q = _questions(run, args.valid, by_id)
    retrievals = _retrievals(run, args.retrievals)
    docs_for = _docs_for(train_q + valid_q, retrievals, by_id, cfg.k)
    ckpt = Path(args.checkpoint)

    def make_model(c: TrainConfig) -> RBGModel:
        if c.init_checkpoint:
            return RBGModel.load(ckpt)
        return RBGModel(base.vocab, base.config)

    out = run.output(args.out)
    rows, reports = [], {}
    for which in args.variants:
        row, report, _ = ablate(cfg, which, make_model, train_q, valid_q, docs_for, by_id, retrievals)
        rows.append(row)
        reports[which] = report.to_json()
        log.info("%s: R-L %.4f", which, row["rouge_l"] or 0.0)
    _json_dump(out, {"rows": rows, "reports": reports})
    plots.plot_ablation(rows, run.output(str(out) + ".png"))
    run.config = {"train": asdict(cfg), "variants": list(args.variants)}
    run.finish(out)
    return out


def faithfulness_probe(model: RBGModel, questions, docs_for, beam_size: int = 4, max_target: int | None = None,
                       name: str = "model", dataset: str = "dataset") -> dict:
    """Zero-shot long answers for extractive questions and the share that contain the short answer."""
    for q in questions:
        if not q.gold_answers:
            raise CliError(f"question {q.q_id!r} has no gold short answer")
    preds = predict(model, questions, docs_for, beam_size, max_target)
    records = [FaithfulnessRecord(q.q_id, q.gold_answers, preds[q.q_id]) for q in questions]
    recall = faithfulness_recall(records)
    return {"table": [{"model": name, dataset: recall}], "recall": recall,
            "rows": [{"id": r.q_id, "gold": list(r.gold), "generated": r.generated, "hit": r.hit} for r in records]}


def cmd_faithfulness(args) -> Path:
    run = Run("faithfulness", args)
    docs, by_id = _corpus(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    questions = _questions(run, args.questions, by_id)
    docs_for = (_docs_for(questions, _retrievals(run, args.retrievals), by_id, args.k) if args.retrievals
                else _dense_docs_for(model, questions, docs, by_id, args.k))
    torch.manual_seed(args.seed)
    report = faithfulness_probe(model, questions, docs_for, args.beam, args.max_target, Path(args.checkpoint).stem,
                                args.dataset or Path(args.questions).stem)
    out = run.output(args.out)
    _json_dump(out, report)
    plots.plot_recall(report["rows"], run.output(str(out) + ".png"))
    sys.stdout.write(f"recall {100 * report['recall']:.2f}\n")
    run.config = {"k": args.k, "beam": args.beam, "max_target": args.max_target}
    run.finish(out)
    return out


# ---------------------------------------------------------------- parser


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _variants(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in VARIANTS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rbg", description="read-before-generate question answering pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fixture", parents=[common], help="copy the bundled 50-document fixture")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("index", parents=[common], help="build a dense or BM25 index")
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=("dense", "bm25"), default="dense")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="reuse this model's retriever instead of initializing one")
    s.add_argument("--questions", action="append", default=[], help="extra vocabulary sources (repeatable)")
    s.add_argument("--model-config", help="JSON file with ModelConfig fields")
    s.add_argument("--model-out", help="where to write the new model (default: <out>.model.pt)")
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--k1", type=float, default=1.2)
    s.add_argument("--b", type=float, default=0.75)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", parents=[common], help="top-K documents per question")
    s.add_argument("--corpus", required=True)
    s.add_argument("--questions", required=True)
    s.add_argument("--index")
    s.add_argument("--mode", choices=("dense", "bm25", "random"), default="dense")
    s.add_argument("--checkpoint")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("pretrain-build", parents=[common], help="build masked-sentence recovery examples")
    s.add_argument("--corpus", required=True)
    s.add_argument("--bm25", help="saved BM25 index (default: build one from the corpus)")
    s.add_argument("--checkpoint", help="model whose vocabulary filters tokens (default: corpus vocabulary)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--mask-rate", type=float, default=MASK_RATE)
    s.add_argument("--min-length", type=int, default=5)
    s.add_argument("--no-capitalized", action="store_true", help="do not require a capitalized word")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_build)

    s = sub.add_parser("pretrain", parents=[common], help="recovery pre-training")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--examples", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--generator-warmup", type=int, default=0)
    s.add_argument("--log-every", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    def train_flags(s):
        s.add_argument("--corpus", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--train", required=True)
        s.add_argument("--retrievals", required=True)
        s.add_argument("--config", help="JSON file with TrainConfig fields")
        s.add_argument("--lr", type=float)
        s.add_argument("--weight-decay", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--steps", dest="max_steps", type=int)
        s.add_argument("--eval-interval", type=int)
        s.add_argument("--k", type=int)
        s.add_argument("--generator-warmup", type=int)
        s.add_argument("--eval-beam", type=int)
        s.add_argument("--eval-max-target", type=int)
        s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="end-to-end fine-tuning")
    train_flags(s)
    s.add_argument("--valid")
    s.add_argument("--resume", help="training state file to continue from")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--no-reader", action="store_true")
    g.add_argument("--reader-frozen", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="beam-search answers")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--questions", required=True)
    s.add_argument("--retrievals", help="cached retrievals (default: dense retrieval with the checkpoint)")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--beam", type=int, default=4)
    s.add_argument("--max-target", type=int, default=300)
    s.add_argument("--no-reader", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="metrics and fine-grained bins")
    s.add_argument("--predictions", required=True)
    s.add_argument("--gold", "--questions", dest="questions", required=True, help="QA file with gold answers")
    s.add_argument("--retrievals")
    s.add_argument("--corpus")
    s.add_argument("--overlap-n", type=int, default=1)
    s.add_argument("--score-thresholds", type=_floats, default=[])
    s.add_argument("--overlap-thresholds", type=_floats, default=[0.0, 0.4, 0.6, 0.8])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    train_flags(s)
    s.add_argument("--valid", required=True)
    s.add_argument("--variants", type=_variants, default=["full", "no_reader"])
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("faithfulness", parents=[common], help="zero-shot short-answer recall probe")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--questions", required=True, help="extractive QA with short gold answers")
    s.add_argument("--retrievals", help="cached retrievals (default: dense retrieval with the checkpoint)")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--beam", type=int, default=4)
    s.add_argument("--max-target", type=int, default=300)
    s.add_argument("--dataset", help="column name in the report (default: questions file stem)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_faithfulness)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.jobs < 1:
        sys.stderr.write("rbg: error: --jobs must be >= 1\n")
        return 2
    torch.set_num_threads(args.jobs)
    try:
        args.func(args)
    except CliError as exc:
        _report_error(str(exc), exc.path)
        return 1
    except FileNotFoundError as exc:
        _report_error("missing file", exc.filename)
        return 1
    except (ValueError, KeyError, RuntimeError, OSError, json.JSONDecodeError) as exc:
        _report_error(f"{type(exc).__name__}: {exc}", None)
        return 1
    return 0


def _report_error(message: str, path) -> None:
    sys.stderr.write(json.dumps({"error": message, "path": path}) + "\n")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
