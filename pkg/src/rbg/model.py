"""Model bundle: retriever, reader and generator sharing one vocabulary, plus checkpoint I/O.

Checkpoint container (``torch.save`` of a plain dict)::

    format          "rbg-checkpoint"
    version         1
    vocab           list of tokens (id order)
    vocab_hash      SHA-256 of the newline-joined tokens
    config          ModelConfig as a dict
    state_dict      every parameter tensor, keyed by module path
    meta            free-form dict (training step, metric, ...)
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Document, SourceInput, Vocabulary, build_source
from .generator import Generator, beam_search
from .reader import EvidenceDistribution, Reader, read_evidence, read_evidence_many
from .retrieval import BiEncoder

CHECKPOINT_FORMAT = "rbg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    reader_layers: int = 2
    retriever_layers: int = 1
    d_ff: int = 128
    max_source: int = 300
    max_target: int = 300
    dropout: float = 0.0
    copy_norm: str = "spread"
    gate_bias: float = 2.0
    seed: int = 0

    @property
    def max_positions(self) -> int:
        return max(self.max_source, self.max_target + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class RBGModel(nn.Module):
    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None):
        super().__init__()
        self.vocab = vocab
        self.config = config = config or ModelConfig()
        torch.manual_seed(config.seed)
        V, d, h, ff, P = len(vocab), config.d_model, config.n_heads, config.d_ff, config.max_positions
        self.retriever = BiEncoder(V, d, h, config.retriever_layers, ff, P)
        self.reader = Reader(V, d, h, config.reader_layers, ff, P, config.dropout)
        self.generator = Generator(V, d, h, config.enc_layers, config.dec_layers, ff, P, config.dropout,
                                   config.copy_norm, config.gate_bias)
        self.reader_calls = 0
        self.loss_calls = 0

    # -- inputs

    def sources(self, question_ids: Sequence[int], docs: Sequence[Document]) -> list[SourceInput]:
        return [build_source(question_ids, d, self.vocab, self.config.max_source) for d in docs]

    def target_ids(self, answer: str) -> list[int]:
        body = self.vocab.encode(answer)[: self.config.max_target]
        return [self.vocab.bos_id, *body, self.vocab.eos_id]

    # -- forward

    def evidence(self, sources: Sequence[SourceInput]) -> EvidenceDistribution:
        self.reader_calls += 1
        return read_evidence(self.reader, sources, self.vocab.pad_id)

    def loss(self, batch: Sequence[tuple[Sequence[int], Sequence[Document], Sequence[int]]],
             use_reader: bool = True) -> torch.Tensor:
        """Mixture NLL for (question ids, documents, target ids) triples.

        Fine-tuning and retrieval-augmented recovery pre-training both call
        this; ``use_reader=False`` forces the gate to 1 and skips the reader.
        """
        self.loss_calls += 1
        groups = [self.sources(q, docs) for q, docs, _ in batch]
        banks = self.generator.encode_many(groups, self.vocab.pad_id)
        if use_reader:
            self.reader_calls += 1
            evidences = read_evidence_many(self.reader, groups, self.vocab.pad_id)
            override = None
        else:
            evidences = [None] * len(groups)
            override = 1.0
        targets = [t for _, _, t in batch]
        return self.generator.sequence_loss(banks, evidences, targets, self.vocab.pad_id, override)

    @torch.no_grad()
    def generate_ids(self, question_ids: Sequence[int], docs: Sequence[Document], beam_size: int = 4,
                     max_target: int | None = None, use_reader: bool = True) -> list[int]:
        srcs = self.sources(question_ids, docs)
        bank = self.generator.encode_all(srcs, self.vocab.pad_id)
        override = None if use_reader else 1.0
        evidence = self.evidence(srcs) if use_reader else None
        p_copy = self.generator.copy_for(bank, evidence, override)
        return beam_search(self.generator, bank, p_copy, self.vocab.bos_id, self.vocab.eos_id, beam_size,
                           max_target or self.config.max_target, override)

    def generate(self, question: str | Sequence[int], docs: Sequence[Document], **kw) -> str:
        q = self.vocab.encode(question) if isinstance(question, str) else question
        return self.vocab.decode(self.generate_ids(q, docs, **kw))

    # -- checkpoints

    def save(self, path, meta: dict | None = None) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "vocab": self.vocab.tokens,
            "vocab_hash": self.vocab.hash(),
            "config": asdict(self.config),
            "state_dict": self.state_dict(),
            "reader_frozen": self.reader.frozen,
            "meta": meta or {},
        }, path)

    @classmethod
    def load(cls, path) -> "RBGModel":
        obj = torch.load(path, map_location="cpu", weights_only=False)
        if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} rbg checkpoint")
        vocab = Vocabulary(obj["vocab"])
        if vocab.hash() != obj["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        model = cls(vocab, ModelConfig.from_dict(obj["config"]))
        dtype = next(iter(obj["state_dict"].values())).dtype
        model.to(dtype)
        model.load_state_dict(obj["state_dict"])
        model.reader.freeze(obj.get("reader_frozen", False))
        model.meta = obj.get("meta", {})
        return model


def seeded_rng(seed: int, stage: str) -> np.random.Generator:
    """Per-stage generator derived from the run seed."""
    return np.random.default_rng([seed, int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")])
