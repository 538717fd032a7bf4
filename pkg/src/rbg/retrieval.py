"""Dense bi-encoder retrieval, Okapi BM25, random sampling and retrieval metrics.

Dense index file layout (all little-endian)::

    magic      8 bytes   b"RBGDENSE"
    version    uint32    1
    dim        uint32    embedding dimension d
    count      uint64    number of documents
    enc_hash   32 bytes  SHA-256 of the document-encoder parameters
    rows       count*d float32, row-major, row i embeds doc_ids[i]
    doc_ids    count records of (uint32 byte length, UTF-8 bytes)
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Document, Vocabulary, tokenize_words
from .layers import TokenEncoder, pad_batch

DENSE_MAGIC = b"RBGDENSE"
DENSE_VERSION = 1


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievedSet:
    q_id: str
    items: tuple[tuple[str, float], ...]
    mode: str = "dense"

    def __post_init__(self):
        ids = [d for d, _ in self.items]
        if len(set(ids)) != len(ids):
            raise RetrievalError("duplicate doc ids in retrieved set")
        for (d0, s0), (d1, s1) in zip(self.items, self.items[1:]):
            if s1 > s0 or (s1 == s0 and d1 < d0):
                raise RetrievalError("retrieved set is not ordered by (score desc, doc_id asc)")

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]

    @property
    def top_score(self) -> float | None:
        return self.items[0][1] if self.items else None

    def to_json(self) -> dict:
        return {"id": self.q_id, "mode": self.mode,
                "retrieved": [{"doc_id": d, "score": s} for d, s in self.items]}

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievedSet":
        return cls(str(obj["id"]), tuple((r["doc_id"], float(r["score"])) for r in obj["retrieved"]),
                   obj.get("mode", "dense"))


def _ranked(q_id: str, doc_ids: Sequence[str], scores: Sequence[float], k: int, mode: str) -> RetrievedSet:
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))[:k]
    return RetrievedSet(q_id, tuple((doc_ids[i], float(scores[i])) for i in order), mode)


# ---------------------------------------------------------------- dense


class BiEncoder(nn.Module):
    """Separate question and document encoders; the embedding is the first-position output."""

    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int, d_ff: int, max_positions: int):
        super().__init__()
        self.query_encoder = TokenEncoder(vocab_size, d_model, n_heads, n_layers, d_ff, max_positions)
        self.doc_encoder = TokenEncoder(vocab_size, d_model, n_heads, n_layers, d_ff, max_positions)
        self.max_positions = max_positions


def embed(encoder: TokenEncoder, token_ids: Sequence[int]) -> torch.Tensor:
    if len(token_ids) == 0:
        raise RetrievalError("empty encoder input")
    ids = torch.as_tensor(list(token_ids), dtype=torch.long)[None]
    with torch.no_grad():
        return encoder(ids)[0, 0]


def query_ids(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    return ([vocab.bos_id] + vocab.encode(text))[:max_len]


def document_ids(doc: Document, vocab: Vocabulary, max_len: int) -> list[int]:
    return ([vocab.bos_id] + vocab.encode(doc.title) + vocab.encode_tokens(doc.tokens))[:max_len]


def score(q_vec, d_vec) -> float:
    q = np.asarray(q_vec, dtype=np.float64)
    d = np.asarray(d_vec, dtype=np.float64)
    if q.shape != d.shape:
        raise RetrievalError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return float(q @ d)


@dataclass
class DenseIndex:
    matrix: np.ndarray
    doc_ids: list[str]
    encoder_hash: str

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.doc_ids):
            raise RetrievalError("embedding rows do not match doc id count")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise RetrievalError("duplicate doc ids in index")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def scores(self, q_vec) -> np.ndarray:
        q = np.asarray(q_vec, dtype=np.float64)
        if q.shape != (self.dim,):
            raise RetrievalError(f"dimension mismatch: {q.shape} vs ({self.dim},)")
        return self.matrix.astype(np.float64) @ q

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(DENSE_MAGIC)
            fh.write(struct.pack("<IIQ", DENSE_VERSION, self.dim, len(self.doc_ids)))
            fh.write(bytes.fromhex(self.encoder_hash))
            fh.write(self.matrix.astype("<f4").tobytes(order="C"))
            for doc_id in self.doc_ids:
                raw = doc_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "DenseIndex":
        data = Path(path).read_bytes()
        if data[:8] != DENSE_MAGIC:
            raise RetrievalError(f"{path}: not a dense index file")
        version, dim, count = struct.unpack_from("<IIQ", data, 8)
        if version != DENSE_VERSION:
            raise RetrievalError(f"{path}: unsupported index version {version}")
        off = 8 + 16
        enc_hash = data[off:off + 32].hex()
        off += 32
        nbytes = 4 * dim * count
        matrix = np.frombuffer(data, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
        off += nbytes
        doc_ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            doc_ids.append(data[off:off + n].decode("utf-8"))
            off += n
        return cls(matrix.astype(np.float32), doc_ids, enc_hash)


def build_dense_index(biencoder: BiEncoder, docs: Sequence[Document], vocab: Vocabulary,
                      encoder_hash: str, batch_size: int = 32) -> DenseIndex:
    rows = []
    enc = biencoder.doc_encoder
    with torch.no_grad():
        for start in range(0, len(docs), batch_size):
            chunk = [document_ids(d, vocab, biencoder.max_positions) for d in docs[start:start + batch_size]]
            ids, mask = pad_batch(chunk, vocab.pad_id)
            rows.append(enc(ids, mask)[:, 0].double().numpy())
    matrix = np.concatenate(rows) if rows else np.zeros((0, enc.embed.embedding_dim))
    return DenseIndex(matrix, [d.doc_id for d in docs], encoder_hash)


def retrieve_top_k(index: DenseIndex, q_vec, K: int, q_id: str = "") -> RetrievedSet:
    if K > len(index):
        raise RetrievalError("K exceeds corpus size")
    if K < 1:
        raise RetrievalError("K must be >= 1")
    return _ranked(q_id, index.doc_ids, index.scores(q_vec).tolist(), K, "dense")


# ---------------------------------------------------------------- BM25


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    k1: float = 1.2
    b: float = 0.75
    avg_length: float = field(init=False)

    def __post_init__(self):
        n = len(self.doc_lengths)
        self.avg_length = sum(self.doc_lengths.values()) / n if n else 0.0

    @classmethod
    def build(cls, docs: Sequence[Document], k1: float = 1.2, b: float = 0.75) -> "Bm25Index":
        postings: dict[str, list[tuple[str, int]]] = {}
        lengths = {}
        for doc in sorted(docs, key=lambda d: d.doc_id):
            terms = tokenize_words(doc.title) + list(doc.tokens)
            lengths[doc.doc_id] = len(terms)
            for term, tf in Counter(terms).items():
                postings.setdefault(term, []).append((doc.doc_id, tf))
        return cls(postings, lengths, k1, b)

    def __len__(self) -> int:
        return len(self.doc_lengths)

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, ()))
        return math.log((len(self) - n + 0.5) / (n + 0.5) + 1.0)

    def scores(self, query_tokens: Sequence[str]) -> dict[str, float]:
        out: dict[str, float] = {}
        for term in query_tokens:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc_id, tf in plist:
                norm = self.k1 * (1 - self.b + self.b * self.doc_lengths[doc_id] / self.avg_length)
                out[doc_id] = out.get(doc_id, 0.0) + idf * tf * (self.k1 + 1) / (tf + norm)
        return out

    def to_json(self) -> dict:
        return {"k1": self.k1, "b": self.b, "avg_length": self.avg_length,
                "doc_lengths": self.doc_lengths,
                "postings": {t: [[d, tf] for d, tf in p] for t, p in sorted(self.postings.items())}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Bm25Index":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        postings = {t: [(d, int(tf)) for d, tf in p] for t, p in obj["postings"].items()}
        return cls(postings, {k: int(v) for k, v in obj["doc_lengths"].items()}, obj["k1"], obj["b"])


def bm25_retrieve(index: Bm25Index, query_tokens: Sequence[str], k: int,
                  exclude_id: str | None = None, q_id: str = "") -> RetrievedSet:
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scored = index.scores(query_tokens)
    scored.pop(exclude_id, None)
    ids = list(scored)
    return _ranked(q_id, ids, [scored[i] for i in ids], k, "bm25")


# ---------------------------------------------------------------- random / metrics


def random_retrieve(doc_ids: Sequence[str], K: int, seed: int, q_id: str = "") -> RetrievedSet:
    if K > len(doc_ids):
        raise RetrievalError("K exceeds corpus size")
    rng = np.random.default_rng(seed)
    picked = sorted(doc_ids[i] for i in rng.choice(len(doc_ids), size=K, replace=False))
    return RetrievedSet(q_id, tuple((d, 0.0) for d in picked), "random")


def retrieval_metrics(retrieved: RetrievedSet | Sequence[str], gold_provenance: Sequence[str]) -> tuple[float, float]:
    """(R-precision, Recall@5) against gold document ids."""
    gold = set(gold_provenance)
    if not gold:
        raise RetrievalError("no provenance")
    ids = retrieved.doc_ids if isinstance(retrieved, RetrievedSet) else list(retrieved)
    r_precision = sum(d in gold for d in ids[: len(gold)]) / len(gold)
    recall_at_5 = len(gold.intersection(ids[:5])) / len(gold)
    return r_precision, recall_at_5
