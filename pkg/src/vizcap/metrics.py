"""Caption metrics: BLEU-4, ROUGE-L, CIDEr-D and an exact-match METEOR variant.

All functions take pre-tokenized captions (lists of strings).  CIDEr-D is
also the SCST reward; its document frequencies come from a reference corpus
and may be frozen with :func:`build_idf`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_refs(references) -> list:
    refs = [list(r) for r in references]
    if not any(refs):
        raise ValueError("need at least one non-empty reference")
    return refs


def _closest_ref_len(c: int, refs) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(candidate, refs, max_n: int = 4):
    """Clipped matches and candidate n-gram totals for n = 1..max_n."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngram_counts(candidate, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngram_counts(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches.append(sum(min(c, max_ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals


def _bleu_from_stats(matches, totals, c_len: int, r_len: int) -> float:
    if c_len == 0:
        return 0.0
    # Orders longer than the candidate have no n-grams and are left out.
    orders = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if any(m == 0 for m, _ in orders):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in orders) / len(orders)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu4(candidate, references) -> float:
    """Sentence BLEU-4 without smoothing, brevity penalty vs the closest reference."""
    refs = _check_refs(references)
    candidate = list(candidate)
    if not candidate:
        return 0.0
    matches, totals = _bleu_stats(candidate, refs)
    return _bleu_from_stats(matches, totals, len(candidate), _closest_ref_len(len(candidate), refs))


def corpus_bleu4(candidates, references) -> float:
    """Corpus BLEU-4: clipped counts and lengths summed over images first."""
    m_tot, t_tot = np.zeros(4), np.zeros(4)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        refs = _check_refs(refs)
        cand = list(cand)
        m, t = _bleu_stats(cand, refs)
        m_tot += m
        t_tot += t
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    return _bleu_from_stats(m_tot.tolist(), t_tot.tolist(), c_len, r_len)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    """LCS F-measure, best over references."""
    refs = _check_refs(references)
    candidate = list(candidate)
    if not candidate:
        return 0.0
    best = 0.0
    for r in refs:
        if not r:
            continue
        lcs = lcs_length(candidate, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(candidate), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


# -- CIDEr-D ---------------------------------------------------------------


@dataclass(frozen=True)
class CorpusIDF:
    df: dict
    n_images: int

    def idf(self, gram) -> float:
        return math.log(self.n_images / max(1, self.df.get(gram, 0)))


def build_idf(references, max_n: int = 4) -> CorpusIDF:
    """Document frequency of each n-gram, one document per image's reference set."""
    references = list(references)
    if not references:
        raise ValueError("empty reference corpus")
    df: Counter = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for n in range(1, max_n + 1):
                seen.update(ngram_counts(list(r), n))
        df.update(seen)
    return CorpusIDF(dict(df), len(references))


def _tfidf(tokens, idf: CorpusIDF, max_n: int):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        vec = {g: c * idf.idf(g) for g, c in ngram_counts(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d_single(candidate, refs, idf: CorpusIDF, sigma: float = 6.0, max_n: int = 4) -> float:
    candidate = list(candidate)
    c_vecs, c_norms = _tfidf(candidate, idf, max_n)
    total = np.zeros(max_n)
    for r in refs:
        r = list(r)
        r_vecs, r_norms = _tfidf(r, idf, max_n)
        delta = len(candidate) - len(r)
        for k in range(max_n):
            val = sum(min(v, r_vecs[k].get(g, 0.0)) * r_vecs[k].get(g, 0.0)
                      for g, v in c_vecs[k].items())
            if c_norms[k] != 0 and r_norms[k] != 0:
                val /= c_norms[k] * r_norms[k]
            total[k] += val * math.exp(-(delta**2) / (2 * sigma**2))
    return float(total.mean() / len(refs) * 10.0)


def cider(candidates, references, idf: CorpusIDF | None = None,
          sigma: float = 6.0) -> tuple[float, np.ndarray]:
    """CIDEr-D per image (0..10 scale) and the corpus mean.

    ``idf`` defaults to document frequencies of ``references`` themselves.
    """
    candidates, references = list(candidates), [list(r) for r in references]
    if not references or len(candidates) != len(references):
        raise ValueError("need one candidate per non-empty reference set")
    if idf is None:
        idf = build_idf(references)
    scores = np.array([cider_d_single(c, refs, idf, sigma) for c, refs in zip(candidates, references)])
    return float(scores.mean()), scores


# -- METEOR (exact unigram matching only) ------------------------------------


def _min_chunks(cand: tuple, ref: tuple) -> tuple[int, int]:
    """Maximum exact-match count and the fewest chunks achieving it."""
    cc, rc = Counter(cand), Counter(ref)
    quota = {t: min(cc[t], rc[t]) for t in cc}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    positions = {t: [j for j, x in enumerate(ref) if x == t] for t in quota if quota[t]}
    # how many occurrences of each type remain at or after candidate index i
    remaining = []
    left = Counter(cc)
    for tok in cand:
        remaining.append(dict(left))
        left[tok] -= 1

    @lru_cache(maxsize=None)
    def best(i: int, prev_j: int, used: int, matched: tuple) -> float:
        if i == len(cand):
            return 0 if all(matched[k] == quota[t] for k, t in enumerate(order)) else math.inf
        tok = cand[i]
        result = math.inf
        k = index.get(tok)
        if k is not None and matched[k] < quota[tok]:
            for j in positions[tok]:
                if used >> j & 1:
                    continue
                new = matched[:k] + (matched[k] + 1,) + matched[k + 1:]
                cost = 0 if (prev_j >= 0 and j == prev_j + 1) else 1
                result = min(result, cost + best(i + 1, j, used | 1 << j, new))
        # skipping is allowed only if the type's quota stays reachable
        need = 0 if k is None else quota[tok] - matched[k]
        if k is None or remaining[i][tok] - 1 >= need:
            result = min(result, best(i + 1, -1, used, matched))
        return result

    order = sorted(positions)
    index = {t: k for k, t in enumerate(order)}
    chunks = best(0, -1, 0, tuple(0 for _ in order))
    return m, int(chunks)


def meteor_lite(candidate, references, alpha: float = 0.9, beta: float = 3.0,
                gamma: float = 0.5) -> float:
    """Fmean = 10PR/(R+9P) times (1 - 0.5 (chunks/matches)^3), best over references."""
    refs = _check_refs(references)
    candidate = tuple(candidate)
    if not candidate:
        return 0.0
    best = 0.0
    for r in refs:
        if not r:
            continue
        m, chunks = _min_chunks(candidate, tuple(r))
        if m == 0:
            continue
        p, rec = m / len(candidate), m / len(r)
        fmean = p * rec / (alpha * p + (1 - alpha) * rec)
        penalty = gamma * (chunks / m) ** beta
        best = max(best, fmean * (1 - penalty))
    return best


# -- report ----------------------------------------------------------------


def evaluate(candidates: dict, references: dict, tokenize) -> dict:
    """Metric report over images present in ``candidates``.

    ``candidates`` maps image id to a caption string, ``references`` maps
    image id to a list of caption strings; ``tokenize`` turns a string into
    tokens.
    """
    ids = [i for i in candidates if i in references]
    missing = [i for i in candidates if i not in references]
    if missing:
        raise KeyError(f"no references for image ids {missing[:5]}")
    if not ids:
        raise ValueError("nothing to evaluate")
    cands = [tokenize(candidates[i]) for i in ids]
    refs = [[tokenize(r) for r in references[i]] for i in ids]
    cider_mean, cider_scores = cider(cands, refs)
    per_image = []
    for k, i in enumerate(ids):
        per_image.append({
            "image_id": i,
            "BLEU4": bleu4(cands[k], refs[k]),
            "ROUGE_L": rouge_l(cands[k], refs[k]),
            "CIDEr": float(cider_scores[k]),
            "METEOR_lite": meteor_lite(cands[k], refs[k]),
        })
    return {
        "BLEU4": corpus_bleu4(cands, refs),
        "ROUGE_L": float(np.mean([p["ROUGE_L"] for p in per_image])),
        "CIDEr": cider_mean,
        "METEOR_lite": float(np.mean([p["METEOR_lite"] for p in per_image])),
        "per_image": per_image,
    }
