"""Documents, questions, tokenization, sentence segmentation and the shared vocabulary."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, MASK = "<pad>", "<s>", "</s>", "<unk>", "[MASK]"
Q_MARK, T_MARK, C_MARK = "question:", "title:", "context:"
RESERVED = (PAD, BOS, EOS, UNK, MASK, Q_MARK, T_MARK, C_MARK)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_TERMINATORS = frozenset(".!?")


def tokenize_words(text: str) -> list[str]:
    """Lowercased word-level tokens, split on whitespace and punctuation."""
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


def raw_tokens(text: str) -> list[str]:
    """Same split as :func:`tokenize_words`, original casing kept."""
    return _TOKEN_RE.findall(text)


def segment_sentences(text: str) -> list[tuple[int, int]]:
    """Half-open token spans, one per sentence.

    A sentence ends at a ``.``, ``!`` or ``?`` token that is followed by
    whitespace or the end of the text. A trailing fragment without a
    terminator is its own sentence.
    """
    matches = list(_TOKEN_RE.finditer(text))
    spans = []
    start = 0
    for i, m in enumerate(matches):
        if m.group(0) not in _TERMINATORS:
            continue
        end_char = m.end()
        if end_char == len(text) or text[end_char].isspace():
            spans.append((start, i + 1))
            start = i + 1
    if start < len(matches):
        spans.append((start, len(matches)))
    return spans


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    tokens: tuple[str, ...] = field(repr=False)
    sentences: tuple[tuple[int, int], ...] = field(repr=False)

    @classmethod
    def from_text(cls, doc_id: str, title: str, text: str) -> "Document":
        return cls(doc_id, title, text, tuple(tokenize_words(text)), tuple(segment_sentences(text)))

    def __post_init__(self):
        pos = 0
        for s, e in self.sentences:
            if s != pos or e <= s:
                raise ValueError(f"sentence spans of {self.doc_id!r} do not partition its tokens")
            pos = e
        if pos != len(self.tokens):
            raise ValueError(f"sentence spans of {self.doc_id!r} do not cover its tokens")

    def sentence_tokens(self, index: int) -> tuple[str, ...]:
        s, e = self.sentences[index]
        return self.tokens[s:e]


@dataclass(frozen=True)
class Question:
    q_id: str
    text: str
    gold_answers: tuple[str, ...] = ()
    gold_provenance: tuple[str, ...] | None = None


class Vocabulary:
    """Token/id bijection with the reserved tokens at ids 0..7."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self._itos = list(tokens)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        if len(self._stoi) != len(self._itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id = RESERVED.index(PAD)
    bos_id = RESERVED.index(BOS)
    eos_id = RESERVED.index(EOS)
    unk_id = RESERVED.index(UNK)
    mask_id = RESERVED.index(MASK)
    question_id = RESERVED.index(Q_MARK)
    title_id = RESERVED.index(T_MARK)
    context_id = RESERVED.index(C_MARK)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self._stoi.get(t, self.unk_id) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize_words(text))

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        special = {self.pad_id, self.bos_id, self.eos_id} if skip_special else set()
        return " ".join(self._itos[i] for i in ids if i not in special)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self._itos, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def build_vocabulary(
    corpus: Sequence[Document], questions: Sequence[Question] = (), min_count: int = 1
) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(tokenize_words(doc.title))
        counts.update(doc.tokens)
    for q in questions:
        counts.update(tokenize_words(q.text))
        for a in q.gold_answers:
            counts.update(tokenize_words(a))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class SourceInput:
    """One ``question: Q title: T context: body`` sequence after truncation.

    ``sentences`` are the document's sentence spans clipped to the surviving
    body tokens, relative to the body start; fully truncated sentences are
    dropped.
    """

    ids: tuple[int, ...]
    body_start: int
    sentences: tuple[tuple[int, int], ...]

    @property
    def n_body(self) -> int:
        return len(self.ids) - self.body_start


def build_source(question_ids: Sequence[int], doc: Document, vocab: Vocabulary, max_len: int) -> SourceInput:
    prefix = [vocab.question_id, *question_ids, vocab.title_id, *vocab.encode(doc.title), vocab.context_id]
    body = vocab.encode_tokens(doc.tokens)
    ids = (prefix + body)[:max_len]
    n_body = len(ids) - len(prefix)
    if n_body <= 0:
        raise ValueError(f"document truncated away: {doc.doc_id!r}")
    clipped = tuple((s, min(e, n_body)) for s, e in doc.sentences if s < n_body)
    return SourceInput(tuple(ids), len(prefix), clipped)


def load_corpus(path) -> list[Document]:
    docs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                doc = Document.from_text(str(obj["id"]), obj.get("title", ""), obj["text"])
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from None
            if doc.doc_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate document id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def load_questions(path, known_doc_ids: set[str] | None = None) -> list[Question]:
    questions = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            prov = obj.get("provenance")
            q = Question(str(obj["id"]), obj["question"], tuple(obj.get("answers", [])),
                         tuple(prov) if prov is not None else None)
            if q.q_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate question id {q.q_id!r}")
            if known_doc_ids is not None and q.gold_provenance:
                missing = [p for p in q.gold_provenance if p not in known_doc_ids]
                if missing:
                    raise ValueError(f"{path}:{lineno}: unknown provenance ids {missing}")
            seen.add(q.q_id)
            questions.append(q)
    return questions


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
