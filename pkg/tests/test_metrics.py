import math

import numpy as np
import pytest

import oracles
from vizcap import metrics
from vizcap.text import normalize

TOL = 1e-9


def _random_case(rng, vocab=10, max_len=8):
    words = [f"w{i}" for i in range(int(rng.integers(2, vocab + 1)))]

    def caption(lo=1):
        return [str(w) for w in rng.choice(words, size=int(rng.integers(lo, max_len + 1)))]

    return caption(), [caption() for _ in range(int(rng.integers(1, 4)))]


@pytest.fixture(scope="module")
def cases():
    rng = np.random.default_rng(2024)
    return [_random_case(rng) for _ in range(50)]


def test_bleu_matches_oracle(cases):
    for cand, refs in cases:
        assert abs(metrics.bleu4(cand, refs) - oracles.bleu4(cand, refs)) <= TOL


def test_rouge_matches_oracle(cases):
    for cand, refs in cases:
        assert abs(metrics.rouge_l(cand, refs) - oracles.rouge_l(cand, refs)) <= TOL


def test_meteor_matches_oracle(cases):
    for cand, refs in cases:
        assert abs(metrics.meteor_lite(cand, refs) - oracles.meteor(cand, refs)) <= TOL


def test_cider_matches_oracle():
    rng = np.random.default_rng(99)
    for _ in range(50):
        n_img = int(rng.integers(1, 5))
        pairs = [_random_case(rng, vocab=6) for _ in range(n_img)]
        cands, refs = [p[0] for p in pairs], [p[1] for p in pairs]
        _, got = metrics.cider(cands, refs)
        np.testing.assert_allclose(got, oracles.cider_d(cands, refs), atol=TOL, rtol=0)


def test_identical_caption_examples():
    c = "a bottle of heinz tomato ketchup".split()
    assert metrics.bleu4(c, [c]) == 1.0
    assert metrics.rouge_l(c, [c]) == 1.0
    # short captions keep the maximum even without any 4-gram
    assert metrics.bleu4(["a", "can"], [["a", "can"]]) == 1.0


def test_bleu_brevity_only():
    assert metrics.bleu4("a b c d".split(), ["a b c d e".split()]) == pytest.approx(math.exp(1 - 5 / 4))
    assert metrics.bleu4("a b c d".split(), ["a b c d e".split()]) == pytest.approx(0.7788, abs=1e-4)


def test_bleu_without_shared_4gram_is_zero():
    assert metrics.bleu4("a b c d e".split(), ["a b c x d e".split()]) == 0.0
    assert metrics.bleu4([], [["a"]]) == 0.0


def test_rouge_examples():
    assert metrics.rouge_l("a b c".split(), ["a x c".split()]) == pytest.approx(2 / 3)
    assert metrics.rouge_l(["a"], [["b"]]) == 0.0


def test_meteor_examples():
    assert metrics.meteor_lite("a b c d".split(), ["a b c d".split()]) == pytest.approx(1 - 0.5 / 64)
    assert metrics.meteor_lite("a b c d".split(), ["a b c d".split()]) == pytest.approx(0.9922, abs=1e-4)
    assert metrics.meteor_lite("a b".split(), ["b a".split()]) == pytest.approx(0.5)
    assert metrics.meteor_lite(["a"], [["b"]]) == 0.0


def test_meteor_prefers_fewer_chunks():
    # "a" can align to either ref position; the adjacent one gives a single chunk
    assert metrics._min_chunks(("a", "b"), ("a", "x", "a", "b")) == (2, 1)


def test_cider_identity_and_disjoint():
    refs = [["a big red box".split()], ["a tin of beans".split()], ["two cans on a shelf".split()]]
    cands = [r[0] for r in refs]
    mean, per = metrics.cider(cands, refs)
    # "a" has idf 0 but every order still has a distinctive gram
    np.testing.assert_allclose(per, 10.0)
    # a 3-token caption has no 4-grams, so that order adds nothing
    refs[0] = ["a red box".split()]
    _, per = metrics.cider([r[0] for r in refs], refs)
    assert per[0] == pytest.approx(7.5)
    _, per = metrics.cider([["zzz"]] * 3, refs)
    np.testing.assert_array_equal(per, 0.0)


def test_idf_examples():
    idf = metrics.build_idf([[["a", "b"]]])
    assert idf.idf(("a",)) == 0.0
    idf = metrics.build_idf([[["a", "b"]], [["a", "c"]]])
    assert idf.idf(("b",)) == pytest.approx(math.log(2))
    assert idf.idf(("a",)) == 0.0


def test_idf_matches_recount():
    rng = np.random.default_rng(4)
    corpus = [_random_case(rng, vocab=5)[1] for _ in range(20)]
    idf = metrics.build_idf(corpus)
    for g, df in idf.df.items():
        n = len(g)
        count = sum(any(g in oracles.grams(r, n) for r in refs) for refs in corpus)
        assert df == count


def test_reference_permutation_invariance(cases):
    for cand, refs in cases[:20]:
        rev = refs[::-1]
        for f in (metrics.bleu4, metrics.rouge_l, metrics.meteor_lite):
            assert f(cand, refs) == pytest.approx(f(cand, rev), abs=1e-15)


def test_ranges_on_degenerate_inputs():
    rng = np.random.default_rng(8)
    for _ in range(100):
        cand, refs = _random_case(rng, vocab=3)
        if rng.random() < 0.2:
            cand = []
        for f in (metrics.bleu4, metrics.rouge_l, metrics.meteor_lite):
            v = f(cand, refs)
            assert 0.0 <= v <= 1.0 and not math.isnan(v)
    with pytest.raises(ValueError):
        metrics.bleu4(["a"], [[]])
    with pytest.raises(ValueError):
        metrics.cider([], [])


def test_corpus_bleu_single_image_equals_sentence():
    c, r = "a b c d e".split(), ["a b c d e f".split()]
    assert metrics.corpus_bleu4([c], [r]) == pytest.approx(metrics.bleu4(c, r))


def test_evaluate_report_shape():
    refs = {"1": ["A red box."], "2": ["a can of beans"]}
    report = metrics.evaluate({"1": "a red box", "2": "a can of beans"}, refs, normalize)
    assert set(report) == {"BLEU4", "ROUGE_L", "CIDEr", "METEOR_lite", "per_image"}
    assert report["BLEU4"] == 1.0 and report["ROUGE_L"] == 1.0
    assert [p["image_id"] for p in report["per_image"]] == ["1", "2"]
    with pytest.raises(KeyError):
        metrics.evaluate({"3": "x"}, refs, normalize)
