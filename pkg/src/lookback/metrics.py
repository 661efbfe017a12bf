"""Repetition, diversity and coherence metrics plus the text embedders they use."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from lookback.core import TokenSeq


def rep_n(tokens: TokenSeq, n: int) -> float:
    """Fraction of duplicate n-grams: 1 - |unique n-grams| / |n-grams|.

    Sequences shorter than ``n`` have no n-grams and score 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    seq = tuple(tokens)
    unique = len({seq[i:i + n] for i in range(total)})
    return 1.0 - unique / total


def diversity(tokens: TokenSeq) -> float:
    return diversity_from_reps([rep_n(tokens, n) for n in (2, 3, 4)])


def diversity_from_reps(reps: Sequence[float]) -> float:
    """Product of (1 - rep-n) for the given rep-2, rep-3, rep-4 fractions."""
    return math.prod(1.0 - r for r in reps)


@runtime_checkable
class Embedder(Protocol):
    def embed(self, tokens: TokenSeq) -> np.ndarray: ...


class DegenerateEmbeddingError(ValueError):
    pass


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateEmbeddingError("degenerate embedding")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def coherence(prefix: TokenSeq, continuation: TokenSeq, embedder: Embedder) -> float:
    if len(prefix) == 0 or len(continuation) == 0:
        raise ValueError("coherence needs a non-empty prefix and continuation")
    return cosine(embedder.embed(prefix), embedder.embed(continuation))


class TfidfEmbedder:
    """L2-normalized TF-IDF bag of token ids.

    tf is the raw count; idf = ln((1 + N) / (1 + df)) + 1 over the fitting
    documents. Ids never seen in fitting get df = 0.
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.idf = np.ones(vocab_size)
        self.n_docs = 0

    def fit(self, docs: Iterable[TokenSeq]) -> "TfidfEmbedder":
        df = np.zeros(self.vocab_size)
        n = 0
        for doc in docs:
            n += 1
            ids = np.fromiter(set(doc), dtype=np.intp)
            df[ids] += 1
        self.n_docs = n
        self.idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        return self

    def embed(self, tokens: TokenSeq) -> np.ndarray:
        vec = np.zeros(self.vocab_size)
        for idx, count in Counter(tokens).items():
            vec[idx] = count
        vec *= self.idf
        norm = np.linalg.norm(vec)
        # An all-zero vector marks empty input; cosine() rejects it.
        return vec / norm if norm > 0 else vec


def embed_tfidf(corpus_stats: TfidfEmbedder, tokens: TokenSeq) -> np.ndarray:
    return corpus_stats.embed(tokens)


class RemoteEmbedder:
    """POSTs ``{"tokens": [ids]}`` and expects ``{"embedding": [floats]}``."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def embed(self, tokens: TokenSeq) -> np.ndarray:
        resp = requests.post(self.endpoint, json={"tokens": [int(t) for t in tokens]}, timeout=self.timeout)
        resp.raise_for_status()
        payload = resp.json()
        if not isinstance(payload, dict) or "embedding" not in payload:
            raise ValueError(f"{self.endpoint}: response lacks 'embedding'")
        return np.asarray(payload["embedding"], dtype=np.float64)
