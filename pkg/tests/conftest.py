import numpy as np
import pytest
import torch

from rbg.corpus import Document, Question, build_vocabulary
from rbg.model import ModelConfig, RBGModel

WORDS = "alpha beta gamma delta river stone tower bridge north south old new red blue green".split()


def random_docs(rng: np.random.Generator, n: int, max_sentences: int = 3, max_words: int = 6, prefix="d"):
    docs = []
    for i in range(n):
        sents = []
        for _ in range(int(rng.integers(1, max_sentences + 1))):
            words = rng.choice(WORDS, size=int(rng.integers(1, max_words + 1)))
            sents.append(" ".join(words).capitalize() + ".")
        docs.append(Document.from_text(f"{prefix}{i:03d}", f"Title {i}", " ".join(sents)))
    return docs


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, reader_layers=1, retriever_layers=1,
                d_ff=32, max_source=64, max_target=24)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_world():
    rng = np.random.default_rng(0)
    docs = random_docs(rng, 6)
    questions = [Question(f"q{i}", f"What about {WORDS[i]}?", (docs[i].text,), (docs[i].doc_id,)) for i in range(4)]
    vocab = build_vocabulary(docs, questions)
    return docs, questions, vocab


@pytest.fixture
def tiny_model(small_world):
    _, _, vocab = small_world
    return RBGModel(vocab, tiny_config())


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
