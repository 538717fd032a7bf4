"""End-to-end fine-tuning of reader and generator, resumable state, and ablation runs."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from .corpus import Document, Question
from .evaluation import evaluate, rouge_l
from .model import RBGModel, seeded_rng
from .retrieval import RetrievedSet, random_retrieve

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    max_steps: int = 1000
    eval_interval: int = 500
    k: int = 10
    seed: int = 0
    grad_clip: float = 1.0
    generator_warmup: int = 0
    eval_beam: int = 1
    eval_max_target: int = 300
    no_reader: bool = False
    reader_frozen: bool = False
    random_retrieval: bool = False
    init_checkpoint: str | None = None

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_steps", "eval_interval", "k", "eval_beam", "eval_max_target"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.generator_warmup < 0:
            raise ValueError("weight_decay, grad_clip and generator_warmup must be non-negative")
        if self.no_reader and self.reader_frozen:
            raise ValueError("no_reader and reader_frozen are mutually exclusive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


@dataclass
class TrainState:
    step: int
    model_state: dict
    optimizer_state: dict
    rng_state: dict
    torch_rng: torch.Tensor
    queue: list[int]
    best_metric: float | None = None
    best_step: int | None = None
    best_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))


@dataclass
class TrainResult:
    state: TrainState
    losses: list[float]

    @property
    def best_metric(self):
        return self.state.best_metric


def build_examples(model: RBGModel, questions: Sequence[Question], docs_for: Mapping[str, Sequence[Document]]):
    """(question ids, documents, target ids) per question that has a gold answer."""
    out = []
    for q in questions:
        if not q.gold_answers:
            continue
        out.append((model.vocab.encode(q.text), list(docs_for[q.q_id]), model.target_ids(q.gold_answers[0])))
    return out


def predict(model: RBGModel, questions: Sequence[Question], docs_for: Mapping[str, Sequence[Document]],
            beam_size: int = 4, max_target: int | None = None, use_reader: bool = True) -> dict[str, str]:
    was_training = model.training
    model.eval()
    out = {q.q_id: model.generate(q.text, docs_for[q.q_id], beam_size=beam_size, max_target=max_target,
                                  use_reader=use_reader) for q in questions}
    model.train(was_training)
    return out


def validation_rouge(model, questions, docs_for, config: TrainConfig) -> float:
    preds = predict(model, questions, docs_for, config.eval_beam, config.eval_max_target, not config.no_reader)
    scores = [rouge_l(preds[q.q_id], q.gold_answers) for q in questions if q.gold_answers]
    return sum(scores) / len(scores) if scores else 0.0


def train(config: TrainConfig, model: RBGModel, train_questions: Sequence[Question],
          docs_for: Mapping[str, Sequence[Document]], valid_questions: Sequence[Question] = (),
          state: TrainState | None = None, log_path=None, dump_dir=None) -> TrainResult:
    """Fine-tune ``model`` in place; returns the final state and per-step losses.

    ``docs_for`` maps every question id to its cached retrieved documents.
    On return the model holds the parameters of the best validation step
    (or the last step when there is no validation set); ``state`` keeps the
    latest parameters so training can resume.
    """
    model.reader.freeze(config.reader_frozen)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay, foreach=True)
    rng = seeded_rng(config.seed, "train-batches")
    queue: list[int] = []
    step = 0
    best_metric = best_step = best_state = None
    history: list[dict] = []
    if state is not None:
        model.load_state_dict(state.model_state)
        opt.load_state_dict(state.optimizer_state)
        rng.bit_generator.state = state.rng_state
        torch.set_rng_state(state.torch_rng)
        queue, step = list(state.queue), state.step
        best_metric, best_step, best_state = state.best_metric, state.best_step, state.best_state
        history = list(state.history)
    else:
        torch.manual_seed(config.seed)

    examples = build_examples(model, train_questions, docs_for)
    example_ids = [q.q_id for q in train_questions if q.gold_answers]
    if not examples:
        raise TrainingError("no training questions with gold answers")
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    losses = []
    model.train()
    try:
        while step < config.max_steps:
            if len(queue) < config.batch_size:
                queue.extend(rng.permutation(len(examples)).tolist())
            idx, queue = queue[: config.batch_size], queue[config.batch_size:]
            batch = [examples[i] for i in idx]
            opt.zero_grad()
            # warm-up steps train the vocabulary head alone, as a pretrained generator would start
            loss = model.loss(batch, use_reader=not config.no_reader and step >= config.generator_warmup)
            if not torch.isfinite(loss):
                _dump_batch(dump_dir, step + 1, [example_ids[i] for i in idx])
                raise TrainingError(f"non-finite loss at step {step + 1}")
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            step += 1
            losses.append(loss.item())
            entry = {"step": step, "loss": losses[-1], "lr": config.lr}
            if valid_questions and (step % config.eval_interval == 0 or step == config.max_steps):
                metric = validation_rouge(model, valid_questions, docs_for, config)
                entry["valid_rouge_l"] = metric
                if best_metric is None or metric > best_metric:
                    best_metric, best_step = metric, step
                    best_state = copy.deepcopy(model.state_dict())
                log.info("step %d loss %.4f valid R-L %.4f", step, losses[-1], metric)
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    final = TrainState(step, copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()),
                       rng.bit_generator.state, torch.get_rng_state(), queue, best_metric, best_step,
                       best_state, history)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(final, losses)


def _dump_batch(dump_dir, step: int, q_ids: list[str]) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nan_batch_step{step}.json"
    path.write_text(json.dumps({"step": step, "q_ids": q_ids}), encoding="utf-8")
    log.error("non-finite loss; offending batch written to %s", path)


# ---------------------------------------------------------------- ablations


VARIANTS = {
    "full": {},
    "no_reader": {"no_reader": True},
    "no_pretrain": {"init_checkpoint": None},
    "no_both": {"no_reader": True, "init_checkpoint": None},
    "reader_frozen": {"reader_frozen": True},
    "random_retrieval": {"random_retrieval": True},
}


def variant_config(config: TrainConfig, which: str) -> TrainConfig:
    if which not in VARIANTS:
        raise ValueError(f"unknown ablation variant {which!r}; expected one of {sorted(VARIANTS)}")
    return config.replace(**VARIANTS[which])


def ablate(config: TrainConfig, which: str, make_model: Callable[[TrainConfig], RBGModel],
           train_questions: Sequence[Question], valid_questions: Sequence[Question],
           docs_for: Mapping[str, Sequence[Document]], corpus: Mapping[str, Document],
           retrievals: Mapping[str, RetrievedSet] | None = None, eval_beam: int | None = None):
    """Train and evaluate one ablation variant under a shared seed.

    ``random_retrieval`` swaps the documents at inference only; training
    retrieval is untouched. Returns ``(row, report, model)``.
    """
    cfg = variant_config(config, which)
    model = make_model(cfg)
    result = train(cfg.replace(random_retrieval=False), model, train_questions, docs_for, valid_questions)
    eval_docs = dict(docs_for)
    eval_retrievals = dict(retrievals or {})
    if cfg.random_retrieval:
        ids = sorted(corpus)
        for q in valid_questions:
            k = len(docs_for[q.q_id])
            rs = random_retrieve(ids, k, int(seeded_rng(cfg.seed, f"random-retrieval/{q.q_id}").integers(2**31)),
                                 q.q_id)
            eval_retrievals[q.q_id] = rs
            eval_docs[q.q_id] = [corpus[d] for d in rs.doc_ids]
    preds = predict(model, valid_questions, eval_docs, eval_beam or cfg.eval_beam, cfg.eval_max_target,
                    not cfg.no_reader)
    report = evaluate(preds, valid_questions, eval_retrievals or None, corpus)
    row = {"variant": which, **{k: v for k, v in report.means.items()}, "best_step": result.state.best_step,
           "final_loss": result.losses[-1] if result.losses else None}
    return row, report, model
