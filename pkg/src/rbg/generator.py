"""Fusion-in-decoder generator with an evidence-guided pointer-generator head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .corpus import SourceInput
from .layers import AttentionCounter, DecoderLayer, TokenEncoder, pad_batch
from .reader import EvidenceDistribution

COPY_NORMS = ("spread", "raw-renorm")


@dataclass
class EncoderBank:
    """Concatenated per-document encoder outputs of one question.

    The three alignment vectors map each concatenated position to its
    document, its token id and its global sentence index (``-1`` for
    question, title and marker positions).
    """

    h_enc: torch.Tensor  # [P, d]
    lengths: list[int]
    doc_index: torch.Tensor
    token_ids: torch.Tensor
    sentence_index: torch.Tensor

    def block(self, i: int) -> torch.Tensor:
        start = sum(self.lengths[:i])
        return self.h_enc[start:start + self.lengths[i]]

    @property
    def n_docs(self) -> int:
        return len(self.lengths)

    def sentences_per_doc(self) -> list[int]:
        counts = []
        for i in range(self.n_docs):
            sel = self.sentence_index[self.doc_index == i]
            sel = sel[sel >= 0]
            counts.append(int(sel.unique().numel()))
        return counts


@dataclass
class DecoderStepOutput:
    h_dec: torch.Tensor  # [d]
    attention: torch.Tensor  # [P]
    context: torch.Tensor  # [d]
    p_gen: torch.Tensor  # scalar
    p_vocab: torch.Tensor  # [V]
    p_copy: torch.Tensor  # [V]
    mixture: torch.Tensor  # [V]


def _alignment(sources: Sequence[SourceInput]):
    doc_index, token_ids, sentence_index = [], [], []
    offset = 0
    for i, src in enumerate(sources):
        sent = [-1] * len(src.ids)
        for j, (s, e) in enumerate(src.sentences):
            for p in range(s, e):
                sent[src.body_start + p] = offset + j
        offset += len(src.sentences)
        doc_index.extend([i] * len(src.ids))
        token_ids.extend(src.ids)
        sentence_index.extend(sent)
    as_long = lambda v: torch.as_tensor(v, dtype=torch.long)  # noqa: E731
    return as_long(doc_index), as_long(token_ids), as_long(sentence_index)


def copy_distribution(evidence: EvidenceDistribution | torch.Tensor, bank: EncoderBank, vocab_size: int,
                      norm: str = "spread") -> torch.Tensor:
    """Word-level copy distribution built from sentence evidence.

    ``spread`` divides each sentence's probability evenly over its tokens
    before summing per word type; ``raw-renorm`` credits every occurrence
    with the full sentence probability and renormalizes.
    """
    probs = evidence.probs if isinstance(evidence, EvidenceDistribution) else evidence
    sel = bank.sentence_index >= 0
    sent = bank.sentence_index[sel]
    toks = bank.token_ids[sel]
    if sent.numel() == 0 or int(sent.max()) + 1 != probs.shape[0]:
        raise ValueError("evidence does not align with the encoder bank")
    if norm == "spread":
        sizes = torch.bincount(sent, minlength=probs.shape[0]).to(probs.dtype)
        weight = probs[sent] / sizes[sent]
        return torch.zeros(vocab_size, dtype=probs.dtype).index_add(0, toks, weight)
    if norm == "raw-renorm":
        raw = torch.zeros(vocab_size, dtype=probs.dtype).index_add(0, toks, probs[sent])
        return raw / raw.sum()
    raise ValueError(f"unknown copy_norm {norm!r}")


def mix(p_gen: torch.Tensor, p_vocab: torch.Tensor, p_copy: torch.Tensor) -> torch.Tensor:
    return p_gen * p_vocab + (1 - p_gen) * p_copy


def nll(mixture: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over steps of -log P(target), per sequence, then over the batch.

    mixture: [B, T, V]; targets: [B, T]; mask: [B, T] with True on real steps.
    """
    picked = mixture.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    logp = torch.log(picked.clamp_min(torch.finfo(picked.dtype).tiny))
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    per_seq = -(logp * mask).sum(-1) / mask.sum(-1)
    return per_seq.mean()


class Generator(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, n_heads: int, enc_layers: int, dec_layers: int,
                 d_ff: int, max_positions: int, dropout: float = 0.0, copy_norm: str = "spread",
                 gate_bias: float = 2.0):
        super().__init__()
        if copy_norm not in COPY_NORMS:
            raise ValueError(f"unknown copy_norm {copy_norm!r}")
        self.vocab_size = vocab_size
        self.copy_norm = copy_norm
        self.embed = nn.Embedding(vocab_size, d_model)
        self.encoder = TokenEncoder(vocab_size, d_model, n_heads, enc_layers, d_ff, max_positions, dropout,
                                    embedding=self.embed)
        self.dec_pos = nn.Embedding(max_positions, d_model)
        self.decoder = nn.ModuleList(DecoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(dec_layers))
        self.drop = nn.Dropout(dropout)
        self.lm_head = nn.Linear(d_model, vocab_size, bias=False)
        self.w_context = nn.Linear(d_model, 1, bias=False)
        self.w_decoder = nn.Linear(d_model, 1, bias=False)
        # starts the gate toward generation so the vocabulary head is trained before copying dominates
        self.gate_bias = nn.Parameter(torch.tensor([float(gate_bias)]))
        self.counter = AttentionCounter()
        self.encoder.set_counter(self.counter, "encoder")
        self.gate_calls = 0

    # -- encoder

    def encode_many(self, groups: Sequence[Sequence[SourceInput]], pad_id: int) -> list[EncoderBank]:
        """One independent encoder pass per document; one bank per group."""
        flat = [s for g in groups for s in g]
        if any(len(g) == 0 for g in groups):
            raise ValueError("need at least one document per question")
        ids, pad = pad_batch([s.ids for s in flat], pad_id, self.embed.weight.device)
        h = self.encoder(ids, pad)
        banks = []
        row = 0
        for g in groups:
            blocks = [h[row + i, : len(s.ids)] for i, s in enumerate(g)]
            row += len(g)
            banks.append(EncoderBank(torch.cat(blocks), [len(s.ids) for s in g], *_alignment(g)))
        return banks

    def encode_all(self, sources: Sequence[SourceInput], pad_id: int) -> EncoderBank:
        if len(sources) == 0:
            raise ValueError("need at least one document")
        return self.encode_many([sources], pad_id)[0]

    # -- decoder

    def decode(self, tgt_ids, memory, tgt_pad=None, memory_pad=None):
        positions = torch.arange(tgt_ids.shape[1], device=tgt_ids.device)
        h = self.drop(self.embed(tgt_ids) + self.dec_pos(positions)[None])
        for layer in self.decoder:
            h = layer(h, memory, tgt_pad, memory_pad)
        return h

    def gate(self, h_dec, memory, memory_pad=None):
        """Attention row over source positions, context vector and generation probability."""
        scores = h_dec @ memory.transpose(-1, -2)
        if memory_pad is not None:
            scores = scores.masked_fill(memory_pad[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        context = attn @ memory
        p_gen = torch.sigmoid(self.w_context(context) + self.w_decoder(h_dec) + self.gate_bias)
        self.gate_calls += 1
        return attn, context, p_gen

    def vocab_distribution(self, h_dec):
        return torch.softmax(self.lm_head(h_dec), dim=-1)

    def output_distribution(self, h_dec, memory, memory_pad, p_copy, gate_override=None):
        """Mixture over the vocabulary for every decoder position: [B, T, V]."""
        p_vocab = self.vocab_distribution(h_dec)
        if gate_override is not None:
            if gate_override == 1.0:
                return p_vocab
            p_gen = torch.full(h_dec.shape[:-1] + (1,), float(gate_override), dtype=h_dec.dtype)
        else:
            _, _, p_gen = self.gate(h_dec, memory, memory_pad)
        return mix(p_gen, p_vocab, p_copy[:, None, :])

    @staticmethod
    def collate(banks: Sequence[EncoderBank]):
        width = max(b.h_enc.shape[0] for b in banks)
        d = banks[0].h_enc.shape[1]
        memory = banks[0].h_enc.new_zeros(len(banks), width, d)
        pad = torch.ones(len(banks), width, dtype=torch.bool)
        rows = []
        for i, b in enumerate(banks):
            n = b.h_enc.shape[0]
            rows.append(torch.cat([b.h_enc, b.h_enc.new_zeros(width - n, d)]) if n < width else b.h_enc)
            pad[i, :n] = False
        memory = torch.stack(rows)
        return memory, pad

    def decode_step(self, bank: EncoderBank, prefix: Sequence[int], evidence: EvidenceDistribution | None,
                    gate_override: float | None = None) -> DecoderStepOutput:
        if len(prefix) == 0:
            raise ValueError("prefix must start with BOS")
        self._check_evidence(bank, evidence, gate_override)
        memory = bank.h_enc[None]
        tgt = torch.as_tensor(list(prefix), dtype=torch.long)[None]
        h_dec = self.decode(tgt, memory)[:, -1:]
        attn, context, p_gen = self.gate(h_dec, memory)
        if gate_override is not None:
            p_gen = torch.full_like(p_gen, float(gate_override))
        p_vocab = self.vocab_distribution(h_dec)[0, 0]
        if evidence is not None:
            p_copy = copy_distribution(evidence, bank, self.vocab_size, self.copy_norm)
        else:
            p_copy = torch.zeros_like(p_vocab)
        g = p_gen[0, 0, 0]
        mixture = p_vocab if gate_override == 1.0 else mix(g, p_vocab, p_copy)
        return DecoderStepOutput(h_dec[0, 0], attn[0, 0], context[0, 0], g, p_vocab, p_copy, mixture)

    def _check_evidence(self, bank, evidence, gate_override):
        if evidence is None:
            if gate_override != 1.0:
                raise ValueError("evidence required unless the gate is forced to 1")
            return
        if evidence.counts_per_doc() != bank.sentences_per_doc():
            raise ValueError("evidence does not align with the encoder bank")

    # -- whole-sequence helpers

    def copy_for(self, bank: EncoderBank, evidence: EvidenceDistribution | None, gate_override=None):
        self._check_evidence(bank, evidence, gate_override)
        if evidence is None:
            return bank.h_enc.new_zeros(self.vocab_size)
        return copy_distribution(evidence, bank, self.vocab_size, self.copy_norm)

    def sequence_loss(self, banks: Sequence[EncoderBank], evidences: Sequence[EvidenceDistribution | None],
                      targets: Sequence[Sequence[int]], pad_id: int, gate_override=None) -> torch.Tensor:
        """Teacher-forced mean negative log-likelihood of each target under the mixture."""
        memory, memory_pad = self.collate(banks)
        p_copy = torch.stack([self.copy_for(b, e, gate_override) for b, e in zip(banks, evidences)])
        tgt, tgt_pad = pad_batch(targets, pad_id)
        inputs, labels, label_mask = tgt[:, :-1], tgt[:, 1:], ~tgt_pad[:, 1:]
        h_dec = self.decode(inputs, memory, tgt_pad[:, :-1], memory_pad)
        probs = self.output_distribution(h_dec, memory, memory_pad, p_copy, gate_override)
        return nll(probs, labels, label_mask)

    def step_log_probs(self, bank: EncoderBank, prefixes: torch.Tensor, p_copy: torch.Tensor, gate_override=None):
        """log P(w) at the last position of each prefix: [n, V]."""
        n = prefixes.shape[0]
        memory = bank.h_enc[None].expand(n, -1, -1)
        h_dec = self.decode(prefixes, memory)[:, -1:]
        probs = self.output_distribution(h_dec, memory, None, p_copy.expand(n, -1), gate_override)[:, 0]
        return torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))

    def plain_forward(self, src_ids: Sequence[int], tgt_ids: Sequence[int]):
        """Single-sequence encoder-decoder pass without any fusion bookkeeping.

        Returns decoder states, vocabulary distribution and gate for every
        target position.
        """
        src = torch.as_tensor(list(src_ids), dtype=torch.long)[None]
        tgt = torch.as_tensor(list(tgt_ids), dtype=torch.long)[None]
        memory = self.encoder(src)
        h_dec = self.decode(tgt, memory)
        _, _, p_gen = self.gate(h_dec, memory)
        return h_dec, self.vocab_distribution(h_dec), p_gen


def greedy_decode(gen: Generator, bank: EncoderBank, p_copy: torch.Tensor, bos: int, eos: int,
                  max_target: int, gate_override=None) -> list[int]:
    out = [bos]
    with torch.no_grad():
        for _ in range(max_target):
            logp = gen.step_log_probs(bank, torch.as_tensor(out)[None], p_copy[None], gate_override)[0]
            w = int(torch.argmax(logp))
            if w == eos:
                break
            out.append(w)
    return out[1:]


def beam_search(gen: Generator, bank: EncoderBank, p_copy: torch.Tensor, bos: int, eos: int,
                beam_size: int, max_target: int, gate_override=None) -> list[int]:
    """Length-bounded beam search on summed log-probabilities, no length penalty.

    Hypotheses that emit EOS are set aside; search stops once ``beam_size``
    of them exist or ``max_target`` tokens have been generated.
    """
    if beam_size < 1 or max_target < 1:
        raise ValueError("beam_size and max_target must be >= 1")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    V = gen.vocab_size
    with torch.no_grad():
        for _ in range(max_target):
            prefixes = torch.as_tensor([seq for seq, _ in alive])
            logp = gen.step_log_probs(bank, prefixes, p_copy[None], gate_override).double()
            totals = torch.as_tensor([s for _, s in alive], dtype=torch.float64)[:, None] + logp
            order = torch.sort(totals.flatten(), descending=True, stable=True).indices.tolist()
            flat = totals.flatten().tolist()
            nxt = []
            for idx in order:
                b, w = divmod(idx, V)
                if w == eos:
                    finished.append((alive[b][0][1:], flat[idx]))
                else:
                    nxt.append((alive[b][0] + [w], flat[idx]))
                if len(nxt) == beam_size or len(finished) >= beam_size:
                    break
            if len(finished) >= beam_size:
                break
            alive = nxt
        else:
            finished.extend((seq[1:], s) for seq, s in alive)
    best = max(range(len(finished)), key=lambda i: (finished[i][1], -i))
    return finished[best][0]
