"""Answer-quality, retrieval and faithfulness metrics, plus threshold-binned reports."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import Document, Question, tokenize_words
from .retrieval import RetrievedSet, retrieval_metrics

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop English articles, collapse whitespace."""
    text = "".join(" " if ch in _PUNCT else ch for ch in text.lower())
    return " ".join(_ARTICLES.sub(" ", text).split())


def _check_refs(references: Sequence[str]) -> None:
    if isinstance(references, str) or len(references) == 0:
        raise ValueError("at least one reference is required")


def _f1(pred: list[str], ref: list[str]) -> float:
    if not pred or not ref:
        return float(pred == ref)
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def unigram_f1(prediction: str, references: Sequence[str]) -> float:
    _check_refs(references)
    pred = normalize_answer(prediction).split()
    return max(_f1(pred, normalize_answer(r).split()) for r in references)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_l(pred: list[str], ref: list[str]) -> float:
    if not pred or not ref:
        return float(pred == ref)
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(pred), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(prediction: str, references: Sequence[str]) -> float:
    """Balanced LCS F-measure over normalized whole-answer tokens, max over references."""
    _check_refs(references)
    pred = normalize_answer(prediction).split()
    return max(_rouge_l(pred, normalize_answer(r).split()) for r in references)


def kilt_rl(rouge: float, r_precision: float) -> float:
    return rouge if r_precision == 1.0 else 0.0


@dataclass
class FaithfulnessRecord:
    q_id: str
    gold: tuple[str, ...]
    generated: str
    hit: bool = field(init=False)

    def __post_init__(self):
        if not self.gold:
            raise ValueError(f"question {self.q_id!r} has no gold short answer")
        self.hit = any(contains_answer(self.generated, g) for g in self.gold)


def contains_answer(long_answer: str, short_answer: str) -> bool:
    """Whole-token containment of the normalized short answer in the normalized long answer."""
    needle = normalize_answer(short_answer).split()
    hay = normalize_answer(long_answer).split()
    if not needle:
        return False
    n = len(needle)
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


def faithfulness_recall(records: Sequence[FaithfulnessRecord]) -> float:
    if not records:
        raise ValueError("no faithfulness records")
    return sum(r.hit for r in records) / len(records)


def _content_tokens(text: str) -> list[str]:
    return [t for t in tokenize_words(text) if any(ch.isalnum() for ch in t)]


def ngram_overlap(gold_answer: str, retrieved_docs: Sequence[str], n: int = 1) -> float:
    """Share of the gold answer's n-grams found anywhere in the retrieved documents."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gold = _content_tokens(gold_answer)
    if len(gold) < n:
        return 0.0
    pool = set()
    for doc in retrieved_docs:
        toks = _content_tokens(doc)
        pool.update(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
    grams = [tuple(gold[i:i + n]) for i in range(len(gold) - n + 1)]
    return sum(g in pool for g in grams) / len(grams)


# ---------------------------------------------------------------- reports


METRICS = ("f1", "rouge_l", "r_precision", "recall_at_5", "kilt_rl")


def _mean(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class EvalReport:
    records: list[dict]
    means: dict = field(default_factory=dict)
    bins: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.means:
            self.means = {m: _mean(r.get(m) for r in self.records) for m in METRICS}
            self.means["count"] = len(self.records)

    def to_json(self) -> dict:
        return {"means": self.means, "bins": self.bins, "records": self.records}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(obj["records"], obj["means"], obj.get("bins", {}))


def evaluate(predictions: Mapping[str, str], questions: Sequence[Question],
             retrievals: Mapping[str, RetrievedSet] | None = None,
             corpus: Mapping[str, Document] | None = None, overlap_n: int = 1) -> EvalReport:
    records = []
    for q in questions:
        if q.q_id not in predictions:
            raise KeyError(f"no prediction for question {q.q_id!r}")
        pred = predictions[q.q_id]
        rec = {"q_id": q.q_id, "answer": pred, "f1": None, "rouge_l": None, "r_precision": None,
               "recall_at_5": None, "kilt_rl": None, "top1_score": None, "overlap": None}
        if q.gold_answers:
            rec["f1"] = unigram_f1(pred, q.gold_answers)
            rec["rouge_l"] = rouge_l(pred, q.gold_answers)
        ret = retrievals.get(q.q_id) if retrievals else None
        if ret is not None:
            rec["top1_score"] = ret.top_score
            if q.gold_provenance:
                rec["r_precision"], rec["recall_at_5"] = retrieval_metrics(ret, q.gold_provenance)
                if rec["rouge_l"] is not None:
                    rec["kilt_rl"] = kilt_rl(rec["rouge_l"], rec["r_precision"])
            if corpus is not None and q.gold_answers:
                texts = [corpus[d].text for d in ret.doc_ids if d in corpus]
                rec["overlap"] = max(ngram_overlap(a, texts, overlap_n) for a in q.gold_answers)
        records.append(rec)
    return EvalReport(records)


def _bin_table(records, key: str, thresholds: Sequence[float]) -> list[dict]:
    rows = []
    for t in sorted(thresholds):
        subset = [r["rouge_l"] for r in records
                  if r.get(key) is not None and r.get("rouge_l") is not None and r[key] > t]
        rows.append({"threshold": t, "count": len(subset), "rouge_l": _mean(subset)})
    for a, b in zip(rows, rows[1:]):
        if b["count"] > a["count"]:
            raise AssertionError("bin nesting violated")
    return rows


def fine_grained_report(report: EvalReport, score_thresholds: Sequence[float] = (),
                        overlap_thresholds: Sequence[float] = (0.0, 0.4, 0.6, 0.8)) -> dict:
    """Mean ROUGE-L and count over questions whose top-1 score / n-gram overlap exceeds each threshold."""
    bins = {"retrieval_score": _bin_table(report.records, "top1_score", score_thresholds),
            "ngram_overlap": _bin_table(report.records, "overlap", overlap_thresholds)}
    report.bins = bins
    return bins


def _fmt(v, scale=100.0) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v * scale:.2f}"


def render_table(report: EvalReport) -> str:
    m = report.means
    lines = [f"questions: {m['count']}",
             "      F1     R-L    RPr.   R@5    KRL",
             "  " + "  ".join(f"{_fmt(m[k]):>6}" for k in METRICS)]
    for name, rows in report.bins.items():
        if not rows:
            continue
        lines.append("")
        lines.append(f">{name:<16}" + "".join(f"{r['threshold']:>9g}" for r in rows))
        lines.append(f"{'# questions':<17}" + "".join(f"{r['count']:>9d}" for r in rows))
        lines.append(f"{'ROUGE-L':<17}" + "".join(f"{_fmt(r['rouge_l']):>9}" for r in rows))
    return "\n".join(lines) + "\n"
