"""Evidence reader: token start/end distributions aggregated into sentence probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .corpus import SourceInput
from .layers import TokenEncoder, pad_batch


@dataclass
class SpanDistributions:
    doc_index: int
    start_probs: torch.Tensor  # [n_body]
    end_probs: torch.Tensor  # [n_body]


@dataclass
class EvidenceDistribution:
    """Sentence probabilities over all K documents, ordered by (doc index, sentence start)."""

    probs: torch.Tensor  # [n_sentences], sums to 1
    sentences: list[tuple[int, tuple[int, int]]]
    per_doc: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.sentences)

    def counts_per_doc(self) -> list[int]:
        return [len(s) for s in self.per_doc]


class Reader(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int, d_ff: int,
                 max_positions: int, dropout: float = 0.0):
        super().__init__()
        self.encoder = TokenEncoder(vocab_size, d_model, n_heads, n_layers, d_ff, max_positions, dropout)
        self.start_head = nn.Linear(d_model, 1)
        self.end_head = nn.Linear(d_model, 1)
        self.frozen = False

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        for p in self.parameters():
            p.requires_grad_(not frozen)

    def logits(self, sources: Sequence[SourceInput], pad_id: int):
        ids, pad = pad_batch([s.ids for s in sources], pad_id, self.start_head.weight.device)
        h = self.encoder(ids, pad)
        return self.start_head(h).squeeze(-1), self.end_head(h).squeeze(-1)

    def forward(self, sources: Sequence[SourceInput], pad_id: int) -> list[SpanDistributions]:
        """Start/end distributions over each source's document-body tokens only."""
        for s in sources:
            if s.n_body <= 0:
                raise ValueError("document truncated away")
        start_logits, end_logits = self.logits(sources, pad_id)
        out = []
        for i, s in enumerate(sources):
            body = slice(s.body_start, len(s.ids))
            out.append(SpanDistributions(i, torch.softmax(start_logits[i, body], -1),
                                         torch.softmax(end_logits[i, body], -1)))
        return out


def predict_spans(reader: Reader, source: SourceInput, pad_id: int) -> SpanDistributions:
    return reader([source], pad_id)[0]


def sentence_evidence(spans: SpanDistributions, sentences: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Half the start+end mass falling inside each sentence."""
    n = spans.start_probs.shape[0]
    if spans.end_probs.shape[0] != n:
        raise ValueError("start/end distributions differ in length")
    if not sentences or sentences[-1][1] != n or sentences[0][0] != 0:
        raise ValueError(f"sentence spans do not align with {n} document tokens")
    token_mass = 0.5 * (spans.start_probs + spans.end_probs)
    owner = torch.empty(n, dtype=torch.long)
    for j, (s, e) in enumerate(sentences):
        owner[s:e] = j
    return torch.zeros(len(sentences), dtype=token_mass.dtype).index_add(0, owner, token_mass)


def normalize_across_docs(per_doc_scores: Sequence[torch.Tensor],
                          sentences: Sequence[Sequence[tuple[int, int]]] | None = None) -> EvidenceDistribution:
    if not per_doc_scores or any(len(s) == 0 for s in per_doc_scores):
        raise ValueError("need at least one document with at least one sentence")
    flat = torch.cat(list(per_doc_scores))
    total = flat.sum()
    if not total > 0:
        raise ValueError("evidence scores sum to zero")
    if sentences is None:
        labels = [(i, (j, j + 1)) for i, s in enumerate(per_doc_scores) for j in range(len(s))]
    else:
        labels = [(i, span) for i, spans in enumerate(sentences) for span in spans]
    return EvidenceDistribution(flat / total, labels, list(per_doc_scores))


def read_evidence(reader: Reader, sources: Sequence[SourceInput], pad_id: int) -> EvidenceDistribution:
    return read_evidence_many(reader, [sources], pad_id)[0]


def read_evidence_many(reader: Reader, groups: Sequence[Sequence[SourceInput]],
                       pad_id: int) -> list[EvidenceDistribution]:
    """One reader pass over every document of every question; one distribution per question."""
    flat = [s for g in groups for s in g]
    spans = reader(flat, pad_id)
    out = []
    row = 0
    for g in groups:
        per_doc = []
        for i, src in enumerate(g):
            spans[row + i].doc_index = i
            per_doc.append(sentence_evidence(spans[row + i], src.sentences))
        row += len(g)
        out.append(normalize_across_docs(per_doc, [src.sentences for src in g]))
    return out
