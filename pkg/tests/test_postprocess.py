import numpy as np
import pytest

import oracles
from vizcap.embeddings import Embedder
from vizcap.postprocess import (CandidateSet, EmbeddingSimilarity, bow_cosine_similarity,
                                consensus_scores, exact_match_similarity, ocr_overlap, rerank,
                                select_by_ocr_max, select_by_self_consensus)

WORDS = ["a", "bottle", "of", "heinz", "ketchup", "red", "can", "tide", "on", "table"]


def random_sets(seed, n=200, size=5):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        cands = [" ".join(rng.choice(WORDS, size=int(rng.integers(1, 6)))) for _ in range(size)]
        if rng.random() < 0.3:
            cands[int(rng.integers(size))] = cands[0]
        ocr = list(rng.choice(WORDS, size=int(rng.integers(0, 4)), replace=False))
        yield cands, ocr


def test_majority_and_all_identical():
    assert select_by_self_consensus(CandidateSet(["x", "x", "y"]), exact_match_similarity) == 0
    assert select_by_self_consensus(CandidateSet(["y", "x", "x"]), exact_match_similarity) == 1
    assert select_by_self_consensus(CandidateSet(["a b"] * 4), bow_cosine_similarity) == 0


@pytest.mark.parametrize("sim", [exact_match_similarity, bow_cosine_similarity])
def test_consensus_matches_oracle(sim):
    for cands, _ in random_sets(1):
        expected, means = oracles.consensus_pick(cands, sim)
        assert select_by_self_consensus(CandidateSet(cands), sim) == expected
        np.testing.assert_allclose(consensus_scores(cands, sim), means, atol=1e-12)


def test_ocr_max_matches_oracle():
    for cands, ocr in random_sets(2):
        got = select_by_ocr_max(CandidateSet(cands), ocr, bow_cosine_similarity)
        assert got == oracles.ocr_max_pick(cands, ocr, bow_cosine_similarity)


def test_heinz_ketchup_example():
    cands = ["a bottle of ketchup on a table", "a bottle of heinz tomato ketchup",
             "a red bottle on a table"]
    ocr = ["HEINZ", "TOMATO", "KETCHUP"]
    for strategy in ("ocr-max", "ocr-max-then-consensus"):
        assert rerank(CandidateSet(cands), ocr, strategy=strategy) == 1


def test_empty_ocr_falls_back_to_consensus():
    cands = ["a red can", "a bottle of tide", "a red can on a table"]
    cs = CandidateSet(cands)
    assert select_by_ocr_max(cs, [], bow_cosine_similarity) == select_by_self_consensus(
        cs, bow_cosine_similarity)
    assert select_by_ocr_max(cs, []) == 0


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    for cands, ocr in random_sets(4, n=100):
        scores = consensus_scores(cands, bow_cosine_similarity)
        perm = rng.permutation(len(cands))
        shuffled = [cands[i] for i in perm]
        for strategy in ("consensus", "ocr-max-then-consensus"):
            i = rerank(CandidateSet(cands), ocr, strategy=strategy)
            j = perm[rerank(CandidateSet(shuffled), ocr, strategy=strategy)]
            # tied candidates may swap, but the winning scores cannot change
            if strategy != "consensus":
                assert ocr_overlap(cands[i], ocr) == ocr_overlap(cands[j], ocr)
            assert scores[i] == pytest.approx(scores[j], abs=1e-12)


def test_selection_is_member_of_input():
    for cands, ocr in random_sets(5, n=50):
        for strategy in ("consensus", "ocr-max", "ocr-max-then-consensus"):
            assert 0 <= rerank(CandidateSet(cands), ocr, strategy=strategy) < len(cands)
    assert rerank(CandidateSet(["only"]), [], strategy="consensus") == 0


def test_similarity_properties():
    emb = EmbeddingSimilarity(Embedder(16))
    for sim in (bow_cosine_similarity, emb, exact_match_similarity):
        for cands, _ in random_sets(6, n=20):
            a, b = cands[0], cands[1]
            assert sim(a, b) == pytest.approx(sim(b, a))
            assert 0.0 <= sim(a, b) <= 1.0
            assert sim(a, a) == pytest.approx(1.0)
    assert bow_cosine_similarity("a b", "c d") == 0.0


def test_validation():
    with pytest.raises(ValueError):
        CandidateSet([])
    with pytest.raises(ValueError):
        rerank(CandidateSet(["a"]), strategy="vote")
