"""Token vectors and the intelligibility lexicon.

Stand-ins for pretrained fastText: a loadable word-vector table with a
deterministic character n-gram hashing fallback for out-of-table tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class Lexicon:
    """Immutable lowercase word set; membership is case-insensitive."""

    def __init__(self, words=()):
        self._words = frozenset(w.strip().lower() for w in words if w.strip())

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._words

    def __len__(self) -> int:
        return len(self._words)

    def __iter__(self):
        return iter(sorted(self._words))

    @property
    def words(self) -> frozenset:
        return self._words

    @classmethod
    def load(cls, path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for w in sorted(self._words):
                fh.write(w + "\n")


def is_intelligible(token: str, lexicon: Lexicon) -> bool:
    token = token.strip()
    return bool(token) and token in lexicon


@dataclass
class VectorTable:
    dim: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        for word, vec in self.entries.items():
            if len(vec) != self.dim:
                raise ValueError(f"vector for {word!r} has length {len(vec)}, expected {self.dim}")
        self.entries = {w: np.asarray(v, dtype=np.float64) for w, v in self.entries.items()}

    def get(self, token: str):
        vec = self.entries.get(token)
        if vec is None:
            vec = self.entries.get(token.lower())
        return vec

    @classmethod
    def load(cls, path) -> "VectorTable":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().split()
            if len(head) != 2 or head[0] != "dim":
                raise ValueError(f"{path}: first line must be 'dim N'")
            dim = int(head[1])
            entries = {}
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(" ")
                if not parts or not parts[0]:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}:{lineno}: expected {dim} components")
                entries[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(dim, entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dim {self.dim}\n")
            for word, vec in self.entries.items():
                fh.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")


class SubwordHasher:
    """fastText-style OOV vectors from hashed byte n-grams of ``<token>``.

    Bucket vectors are uniform in [-0.5, 0.5]^dim, drawn from a generator
    seeded by ``(seed, bucket)`` so they never depend on query order.
    """

    def __init__(self, dim: int, bucket_count: int = 1 << 18, seed: int = 1234,
                 ngram_min: int = 3, ngram_max: int = 6):
        if not 1 <= ngram_min <= ngram_max:
            raise ValueError("need 1 <= ngram_min <= ngram_max")
        self.dim = dim
        self.bucket_count = bucket_count
        self.seed = seed
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self._buckets: dict[int, np.ndarray] = {}

    def ngrams(self, token: str) -> list[bytes]:
        raw = ("<" + token + ">").encode("utf-8")
        return [raw[i:i + n]
                for n in range(self.ngram_min, self.ngram_max + 1)
                for i in range(len(raw) - n + 1)]

    def bucket(self, ngram: bytes) -> int:
        return fnv1a_64(ngram) % self.bucket_count

    def bucket_vector(self, b: int) -> np.ndarray:
        vec = self._buckets.get(b)
        if vec is None:
            vec = np.random.default_rng([self.seed, b]).uniform(-0.5, 0.5, self.dim)
            self._buckets[b] = vec
        return vec

    def __call__(self, token: str) -> np.ndarray:
        grams = self.ngrams(token)
        vec = np.mean([self.bucket_vector(self.bucket(g)) for g in grams], axis=0)
        return vec / np.linalg.norm(vec)


def embed_token(token: str, table: VectorTable | None, hasher: SubwordHasher) -> np.ndarray:
    token = token.strip()
    if not token:
        raise ValueError("cannot embed an empty token")
    if table is not None:
        if table.dim != hasher.dim:
            raise ValueError(f"table dim {table.dim} != hasher dim {hasher.dim}")
        vec = table.get(token)
        if vec is not None:
            return vec
    return hasher(token)


class Embedder:
    """Caching front end over a table and hasher; lowercases OCR/OBJ tokens."""

    def __init__(self, dim: int, table: VectorTable | None = None, seed: int = 1234):
        self.dim = dim
        self.table = table
        self.hasher = SubwordHasher(dim, seed=seed)
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, token: str) -> np.ndarray:
        key = token.strip().lower()
        vec = self._cache.get(key)
        if vec is None:
            vec = embed_token(key, self.table, self.hasher)
            self._cache[key] = vec
        return vec

    def many(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self(t) for t in tokens])
