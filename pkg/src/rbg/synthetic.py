"""Synthetic datasets: the verbatim-copy QA task and the bundled 50-document fixture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Document, Question
from .retrieval import RetrievedSet

_FILLER = (
    "river stone harbor market castle valley bridge forest garden tower meadow island temple village "
    "canal mountain lantern orchard quarry mill station library theater museum palace fortress abbey "
    "chapel granary vineyard lighthouse monastery observatory academy arsenal citadel pavilion "
    "red green blue ancient northern southern eastern western quiet busy famous hidden old new grand "
    "small large stone wooden golden silver iron copper built opened restored expanded founded visited "
    "painted crossed guarded ruled named drained mapped"
).split()


@dataclass
class CopyTask:
    corpus: list[Document]
    train: list[Question]
    valid: list[Question]
    retrievals: dict[str, RetrievedSet]

    @property
    def docs_by_id(self) -> dict[str, Document]:
        return {d.doc_id: d for d in self.corpus}

    def docs_for(self) -> dict[str, list[Document]]:
        by_id = self.docs_by_id
        return {q: [by_id[d] for d in rs.doc_ids] for q, rs in self.retrievals.items()}


def copy_task(n_questions: int = 200, k: int = 3, sentences_per_doc: int = 3, words_per_sentence: int = 4,
              valid_fraction: float = 0.2, seed: int = 0) -> CopyTask:
    """QA pairs whose gold answer is a verbatim sentence of one of the ``k`` retrieved documents.

    Every sentence opens with a unique entity name; the question names the
    entity of its answer sentence. Distractor documents are drawn from the
    rest of the corpus and the gold document's rank is random.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n_questions):
        sents = []
        for j in range(sentences_per_doc):
            words = rng.choice(_FILLER, size=words_per_sentence, replace=False)
            sents.append(f"Ent{i}x{j} " + " ".join(words) + ".")
        corpus.append(Document.from_text(f"doc{i:04d}", f"Place {i}", " ".join(sents)))
    questions, retrievals = [], {}
    for i, doc in enumerate(corpus):
        j = int(rng.integers(sentences_per_doc))
        answer = " ".join(doc.sentence_tokens(j))
        q_id = f"q{i:04d}"
        questions.append(Question(q_id, f"What about ent{i}x{j}?", (answer,), (doc.doc_id,)))
        others = rng.choice([d for d in range(n_questions) if d != i], size=k - 1, replace=False)
        ids = [doc.doc_id] + [corpus[o].doc_id for o in others]
        scores = rng.permutation(np.arange(k, 0, -1).astype(float))
        items = sorted(zip(ids, scores.tolist()), key=lambda x: (-x[1], x[0]))
        retrievals[q_id] = RetrievedSet(q_id, tuple(items), "dense")
    n_valid = int(round(valid_fraction * n_questions))
    return CopyTask(corpus, questions[n_valid:], questions[:n_valid], retrievals)


_TOPICS = [
    ("Cape Horn", "headland", "Chile", "sailors"), ("Lake Baikal", "lake", "Russia", "seals"),
    ("Mount Kenya", "mountain", "Kenya", "climbers"), ("Ayers Rock", "monolith", "Australia", "visitors"),
    ("Angel Falls", "waterfall", "Venezuela", "pilots"), ("Loch Ness", "loch", "Scotland", "tourists"),
    ("Table Mountain", "plateau", "South Africa", "hikers"), ("Dead Sea", "salt lake", "Jordan", "swimmers"),
    ("Victoria Falls", "waterfall", "Zambia", "explorers"), ("Mont Blanc", "summit", "France", "guides"),
]
_TEMPLATES = [
    "{name} is a {kind} in {country}.",
    "The {kind} was first described by {people} in the {century} century.",
    "{name} is known for its {adj} weather and {adj2} views.",
    "Many {people} travel to {name} every {season}.",
    "The area around {name} was protected in {year}.",
]
_ADJ = "harsh mild windy calm foggy sunny stormy clear".split()
_SEASONS = "spring summer autumn winter".split()


def fixture(n_docs: int = 50, seed: int = 7) -> tuple[list[dict], list[dict]]:
    """Readable encyclopedic documents plus QA rows with provenance, as JSON-ready dicts."""
    rng = np.random.default_rng(seed)
    docs, qa = [], []
    for i in range(n_docs):
        name, kind, country, people = _TOPICS[i % len(_TOPICS)]
        if i >= len(_TOPICS):
            name = f"{name} {['North', 'South', 'East', 'West'][(i // len(_TOPICS) - 1) % 4]} {i}"
        fields = {"name": name, "kind": kind, "country": country, "people": people,
                  "century": ["16th", "17th", "18th", "19th"][int(rng.integers(4))],
                  "adj": _ADJ[int(rng.integers(len(_ADJ)))], "adj2": _ADJ[int(rng.integers(len(_ADJ)))],
                  "season": _SEASONS[int(rng.integers(4))], "year": str(1850 + int(rng.integers(150)))}
        sents = [t.format(**fields) for t in _TEMPLATES]
        doc_id = f"d{i:03d}"
        docs.append({"id": doc_id, "title": name, "text": " ".join(sents)})
        if i % 2 == 0:
            qa.append({"id": f"q{i:03d}", "question": f"Where is {name} and when was it protected?",
                       "answers": [f"{sents[0]} {sents[4]}"], "provenance": [doc_id]})
        else:
            qa.append({"id": f"q{i:03d}", "question": f"Why do {people} visit {name}?",
                       "answers": [f"{sents[3]} {sents[2]}"], "provenance": [doc_id]})
    return docs, qa
