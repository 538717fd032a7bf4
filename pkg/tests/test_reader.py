import pytest
import torch

from rbg.corpus import Document, build_source
from rbg.reader import (Reader, SpanDistributions, normalize_across_docs, predict_spans, read_evidence,
                        sentence_evidence)


def token_loop_oracle(start, end, sentences):
    out = []
    for s, e in sentences:
        total = 0.0
        for w in range(s, e):
            total += float(start[w]) + float(end[w])
        out.append(0.5 * total)
    return out


def test_single_token_document(small_world):
    _, _, vocab = small_world
    reader = Reader(len(vocab), 16, 2, 1, 32, 64)
    src = build_source(vocab.encode("alpha"), Document.from_text("d", "T", "river"), vocab, 64)
    spans = predict_spans(reader, src, vocab.pad_id)
    assert spans.start_probs.tolist() == [1.0] and spans.end_probs.tolist() == [1.0]


def test_distributions_over_body_only(small_world):
    docs, _, vocab = small_world
    reader = Reader(len(vocab), 16, 2, 1, 32, 64)
    srcs = [build_source(vocab.encode("what about beta"), d, vocab, 64) for d in docs]
    spans = reader(srcs, vocab.pad_id)
    for src, sp in zip(srcs, spans):
        assert sp.start_probs.shape == (src.n_body,)
        assert sp.start_probs.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert sp.end_probs.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert (sp.start_probs >= 0).all()


def test_one_sentence_document():
    sp = SpanDistributions(0, torch.tensor([0.2, 0.8]), torch.tensor([0.5, 0.5]))
    assert sentence_evidence(sp, [(0, 2)]).tolist() == [1.0]


def test_uniform_four_six():
    u = torch.full((10,), 0.1, dtype=torch.float64)
    scores = sentence_evidence(SpanDistributions(0, u, u), [(0, 4), (4, 10)])
    assert scores.tolist() == pytest.approx([0.4, 0.6], abs=1e-15)


def test_matches_token_loop(rng):
    for _ in range(20):
        n = int(rng.integers(1, 30))
        cuts = sorted(set(rng.integers(1, n, size=int(rng.integers(0, 4))).tolist())) if n > 1 else []
        bounds = [0, *cuts, n]
        sents = list(zip(bounds, bounds[1:]))
        start = torch.softmax(torch.as_tensor(rng.normal(size=n)), 0)
        end = torch.softmax(torch.as_tensor(rng.normal(size=n)), 0)
        got = sentence_evidence(SpanDistributions(0, start, end), sents)
        assert got.tolist() == pytest.approx(token_loop_oracle(start, end, sents), abs=1e-12)


def test_misaligned_lengths():
    sp = SpanDistributions(0, torch.ones(3) / 3, torch.ones(3) / 3)
    with pytest.raises(ValueError):
        sentence_evidence(sp, [(0, 2)])
    with pytest.raises(ValueError):
        sentence_evidence(SpanDistributions(0, torch.ones(3) / 3, torch.ones(2) / 2), [(0, 3)])


def test_normalize_k1_identity():
    x = torch.tensor([0.25, 0.75], dtype=torch.float64)
    assert torch.equal(normalize_across_docs([x]).probs, x)


def test_normalize_k2_halves():
    a, b = torch.tensor([0.3, 0.7], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)
    assert normalize_across_docs([a, b]).probs.tolist() == pytest.approx([0.15, 0.35, 0.5])


def test_normalize_errors():
    with pytest.raises(ValueError):
        normalize_across_docs([])
    with pytest.raises(ValueError):
        normalize_across_docs([torch.zeros(2)])


def test_normalize_random_sums(rng):
    for _ in range(50):
        parts = [torch.as_tensor(rng.random(int(rng.integers(1, 5)))) + 1e-3 for _ in range(int(rng.integers(1, 5)))]
        assert float(normalize_across_docs(parts).probs.sum()) == pytest.approx(1.0, abs=1e-6)


def test_evidence_order_and_permutation(small_world):
    docs, _, vocab = small_world
    torch.manual_seed(0)
    reader = Reader(len(vocab), 16, 2, 1, 32, 64).double()
    q = vocab.encode("what about gamma")
    srcs = [build_source(q, d, vocab, 64) for d in docs[:3]]
    ev = read_evidence(reader, srcs, vocab.pad_id)
    assert [i for i, _ in ev.sentences] == sorted(i for i, _ in ev.sentences)
    assert ev.probs.sum().item() == pytest.approx(1.0, abs=1e-12)
    swapped = read_evidence(reader, [srcs[1], srcs[0], srcs[2]], vocab.pad_id)
    n0, n1 = ev.counts_per_doc()[:2]
    expect = torch.cat([ev.probs[n0:n0 + n1], ev.probs[:n0], ev.probs[n0 + n1:]])
    assert torch.allclose(swapped.probs, expect, rtol=0, atol=1e-14)


def test_freeze_flag(small_world):
    _, _, vocab = small_world
    reader = Reader(len(vocab), 16, 2, 1, 32, 64)
    reader.freeze(True)
    assert reader.frozen and not any(p.requires_grad for p in reader.parameters())
    reader.freeze(False)
    assert all(p.requires_grad for p in reader.parameters())
