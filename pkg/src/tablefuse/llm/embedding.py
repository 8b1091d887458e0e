"""Offline text encoder: seeded hashing of character trigrams and words."""

from __future__ import annotations

import hashlib
import re

import numpy as np

DEFAULT_DIM = 256
_WORD = re.compile(r"[a-z0-9]+")


def _grams(text: str) -> list[str]:
    text = text.lower()
    grams = ["c:" + text[i:i + 3] for i in range(max(len(text) - 2, 1))]
    grams += ["w:" + w for w in _WORD.findall(text)]
    return grams


class HashingEmbedder:
    """Deterministic bag-of-n-grams embedding, L2 normalised.

    Buckets come from keyed BLAKE2b, so vectors are stable across processes
    and platforms (unlike the builtin ``hash``).
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)

    @property
    def name(self) -> str:
        return f"hashing-{self.dim}-s{self.seed}"

    def bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little") % self.dim

    def buckets(self, text: str) -> set[int]:
        return {self.bucket(g) for g in _grams(text)}

    def __call__(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for g in _grams(text):
            vec[self.bucket(g)] += 1.0
        return vec / np.linalg.norm(vec)
