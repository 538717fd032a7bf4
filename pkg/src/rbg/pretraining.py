"""Retrieval-augmented recovery: mask a sentence, retrieve with BM25, learn to restore it."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import Document, Vocabulary, raw_tokens
from .retrieval import Bm25Index, bm25_retrieve

log = logging.getLogger(__name__)

MASK_RATE = 0.3


@dataclass(frozen=True)
class SentenceFilter:
    min_length: int = 5
    require_capitalized: bool = True

    def accepts(self, doc: Document, index: int) -> bool:
        s, e = doc.sentences[index]
        words = [t for t in doc.tokens[s:e] if t.isalnum()]
        if len(words) < self.min_length:
            return False
        if not self.require_capitalized:
            return True
        # a capitalized non-initial word stands in for a named entity
        return any(w[:1].isupper() for w in raw_tokens(doc.text)[s + 1:e])


def mask_count(length: int, rate: float = MASK_RATE) -> int:
    if rate <= 0:
        return 0
    return max(1, int(Fraction(str(rate)) * length))


@dataclass(frozen=True)
class RarExample:
    doc_id: str
    sentence_index: int
    sentence: tuple[int, ...]
    pseudo_query: tuple[int, ...]
    retrieved: tuple[str, ...]
    mask_positions: tuple[int, ...]

    def to_json(self, vocab: Vocabulary) -> dict:
        # tokens rather than ids, so the file does not depend on one vocabulary
        return {"sentence": vocab.decode(self.sentence, False), "pseudo_query": vocab.decode(self.pseudo_query, False),
                "retrieved": list(self.retrieved), "mask_positions": list(self.mask_positions),
                "doc_id": self.doc_id, "sentence_index": self.sentence_index}

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary) -> "RarExample":
        sent = vocab.encode_tokens(obj["sentence"].split(" "))
        pos = tuple(obj["mask_positions"])
        if any(not 0 <= p < len(sent) for p in pos):
            raise ValueError(f"mask positions out of range for sentence {obj['sentence']!r}")
        query = [vocab.mask_id if i in pos else t for i, t in enumerate(sent)]
        return cls(obj.get("doc_id", ""), obj.get("sentence_index", -1), tuple(sent), tuple(query),
                   tuple(obj["retrieved"]), pos)


def build_rar_examples(corpus: Sequence[Document], bm25: Bm25Index, vocab: Vocabulary,
                       sentence_filter: SentenceFilter = SentenceFilter(), k: int = 5, n: int = 1,
                       seed: int = 0, mask_rate: float = MASK_RATE) -> list[RarExample]:
    """Sample ``n`` qualifying sentences, mask them and retrieve supporting documents.

    Sentences whose BM25 retrieval (host document excluded) comes back empty
    cannot be recovered from evidence and are skipped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    candidates = [(doc, j) for doc in sorted(corpus, key=lambda d: d.doc_id)
                  for j in range(len(doc.sentences)) if sentence_filter.accepts(doc, j)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))
    picked = []
    for idx in order:
        doc, j = candidates[idx]
        words = doc.sentence_tokens(j)
        ret = bm25_retrieve(bm25, words, k, exclude_id=doc.doc_id)
        if not ret.items:
            continue
        picked.append((doc, j, ret.doc_ids))
        if len(picked) == n:
            break
    if len(picked) < n:
        raise ValueError(f"only {len(picked)} qualifying sentences, {n} requested (short by {n - len(picked)})")
    picked.sort(key=lambda x: (x[0].doc_id, x[1]))
    examples = []
    for doc, j, retrieved in picked:
        sent = vocab.encode_tokens(doc.sentence_tokens(j))
        n_mask = mask_count(len(sent), mask_rate)
        positions = tuple(sorted(int(p) for p in rng.choice(len(sent), size=n_mask, replace=False)))
        query = list(sent)
        for p in positions:
            query[p] = vocab.mask_id
        examples.append(RarExample(doc.doc_id, j, tuple(sent), tuple(query), tuple(retrieved), positions))
    return examples


def rar_batch(model, examples: Sequence[RarExample], docs_by_id: Mapping[str, Document]):
    vocab = model.vocab
    return [(list(ex.pseudo_query), [docs_by_id[d] for d in ex.retrieved],
             [vocab.bos_id, *ex.sentence[: model.config.max_target], vocab.eos_id]) for ex in examples]


def pretrain(model, examples: Sequence[RarExample], docs_by_id: Mapping[str, Document], steps: int,
             lr: float = 1e-3, weight_decay: float = 0.01, batch_size: int = 4, seed: int = 0,
             grad_clip: float = 1.0, generator_warmup: int = 0, log_every: int = 0) -> list[float]:
    """Minimize the recovery loss; returns the per-step loss curve.

    The first ``generator_warmup`` steps run with the gate forced to 1.
    """
    if not examples:
        raise ValueError("no pre-training examples")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, foreach=True)
    rng = np.random.default_rng(seed)
    model.train()
    losses = []
    perm: list[int] = []
    for step in range(1, steps + 1):
        if len(perm) < batch_size:
            perm.extend(rng.permutation(len(examples)).tolist())
        idx, perm = perm[:batch_size], perm[batch_size:]
        batch = rar_batch(model, [examples[i] for i in idx], docs_by_id)
        opt.zero_grad()
        loss = model.loss(batch, use_reader=step > generator_warmup)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite pre-training loss at step {step}")
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    model.eval()
    return losses
