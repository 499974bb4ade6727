"""Caption normalization, WordPiece segmentation and the caption vocabulary."""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
CONTINUATION = "##"


def normalize(raw: str) -> list[str]:
    """Drop control characters and Unicode punctuation, lowercase, split on whitespace."""
    out = []
    for ch in raw:
        cat = unicodedata.category(ch)
        if cat.startswith("P"):
            continue
        if cat.startswith("C"):
            # \n, \r, \t and friends separate words rather than glue them.
            out.append(" ")
            continue
        out.append(ch)
    return "".join(out).lower().split()


class TokenizerVocab:
    """Dense token <-> id map with the four specials at ids 0..3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenizerVocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "TokenizerVocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def wordpiece(word: str, vocab: TokenizerVocab, max_chars: int = 100) -> list[str]:
    """Greedy longest-match-first segmentation; ``[<unk>]`` when stuck."""
    if len(word) > max_chars:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = CONTINUATION + sub
            if sub in vocab:
                piece = sub
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def preprocess_caption(raw: str, vocab: TokenizerVocab | None = None) -> list[str]:
    """Normalize ``raw``; with a vocabulary, also WordPiece-segment each word."""
    words = normalize(raw)
    if vocab is None:
        return words
    return [p for w in words for p in wordpiece(w, vocab)]


def build_vocab(corpus, min_freq: int = 1, exclude=()) -> TokenizerVocab:
    """Specials first, then words by descending frequency, ties alphabetical."""
    if not corpus:
        raise ValueError("empty corpus")
    exclude = set(exclude)
    counts = Counter(w for caption in corpus for w in normalize(caption))
    words = [w for w, c in counts.items() if c >= min_freq and w not in exclude and w not in SPECIALS]
    words.sort(key=lambda w: (-counts[w], w))
    return TokenizerVocab(list(SPECIALS) + words)


def merge_pieces(tokens) -> str:
    """Join tokens with spaces, gluing ``##`` continuations onto their predecessor."""
    words: list[str] = []
    for tok in tokens:
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        elif tok.startswith(CONTINUATION):
            words.append(tok[len(CONTINUATION):])
        else:
            words.append(tok)
    return " ".join(words)
