"""Candidate caption selection: self-consensus and OCR-overlap rerankers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import Embedder
from .model import detokenize  # noqa: F401  (re-exported: de-tokenization step)
from .text import normalize

STRATEGIES = ("consensus", "ocr-max", "ocr-max-then-consensus")


@dataclass
class CandidateSet:
    candidates: list            # caption strings
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("empty candidate set")
        self.candidates = [c.surface if hasattr(c, "surface") else str(c) for c in self.candidates]
        if not self.sources:
            self.sources = [f"system{i}" for i in range(len(self.candidates))]


def exact_match_similarity(a: str, b: str) -> float:
    return 1.0 if normalize(a) == normalize(b) else 0.0


def bow_cosine_similarity(a: str, b: str) -> float:
    """Cosine between bag-of-words count vectors; 1 for two empty captions."""
    ta, tb = normalize(a), normalize(b)
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    vocab = sorted(set(ta) | set(tb))
    va = np.array([ta.count(w) for w in vocab], dtype=float)
    vb = np.array([tb.count(w) for w in vocab], dtype=float)
    return float(np.clip(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)), 0.0, 1.0))


class EmbeddingSimilarity:
    """Cosine of mean token vectors, clipped to [0, 1]; identical strings score 1."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    def _vec(self, text: str):
        toks = normalize(text)
        return self.embedder.many(toks).mean(axis=0) if toks else None

    def __call__(self, a: str, b: str) -> float:
        if normalize(a) == normalize(b):
            return 1.0
        va, vb = self._vec(a), self._vec(b)
        if va is None or vb is None:
            return 0.0
        den = np.linalg.norm(va) * np.linalg.norm(vb)
        if den == 0:
            return 0.0
        return float(np.clip(va @ vb / den, 0.0, 1.0))


def consensus_scores(cands, sim) -> np.ndarray:
    """Mean similarity of each candidate to all the others."""
    n = len(cands)
    if n < 2:
        return np.zeros(n)
    S = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            S[i, j] = S[j, i] = sim(cands[i], cands[j])
    return S.sum(axis=1) / (n - 1)


def consensus_order(cands, sim) -> list[int]:
    scores = consensus_scores(cands, sim)
    return sorted(range(len(cands)), key=lambda i: (-scores[i], i))


def select_by_self_consensus(cset: CandidateSet, sim) -> int:
    """Index of the candidate most similar on average to the rest (ties: lowest index)."""
    return consensus_order(cset.candidates, sim)[0]


def ocr_overlap(caption: str, ocr_tokens) -> int:
    ocr = {t.strip().lower() for t in ocr_tokens if t.strip()}
    return len(set(normalize(caption)) & ocr)


def select_by_ocr_max(cset: CandidateSet, ocr_tokens, sim=None) -> int:
    """Index of the candidate covering the most distinct OCR tokens.

    Ties fall back to self-consensus order (when ``sim`` is given), then to
    the lowest index.
    """
    overlaps = [ocr_overlap(c, ocr_tokens) for c in cset.candidates]
    if sim is not None and len(cset.candidates) > 1:
        rank = {i: r for r, i in enumerate(consensus_order(cset.candidates, sim))}
    else:
        rank = {i: i for i in range(len(cset.candidates))}
    return min(range(len(overlaps)), key=lambda i: (-overlaps[i], rank[i], i))


def rerank(cset: CandidateSet, ocr_tokens=(), sim=bow_cosine_similarity,
           strategy: str = "ocr-max-then-consensus") -> int:
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if strategy == "consensus":
        return select_by_self_consensus(cset, sim) if len(cset.candidates) > 1 else 0
    if strategy == "ocr-max":
        return select_by_ocr_max(cset, ocr_tokens, None)
    return select_by_ocr_max(cset, ocr_tokens, sim)
