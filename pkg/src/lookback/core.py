"""Vocabulary, whitespace tokenization and probability-distribution primitives."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
EOT = "<eot>"
UNK_ID = 0
EOT_ID = 1

# Every ProbDist entry is at least FLOOR so that KL stays finite.
FLOOR = 1e-12
SUM_TOL = 1e-9

TokenSeq = Sequence[int]


class Vocabulary:
    """Bidirectional token <-> id map with ``<unk>`` at 0 and ``<eot>`` at 1."""

    __slots__ = ("_tokens", "_index")

    def __init__(self, tokens: Iterable[str] = ()):
        ordered = [UNK, EOT]
        seen = set(ordered)
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"invalid token {tok!r}: tokens must be non-empty and whitespace-free")
            if tok not in seen:
                seen.add(tok)
                ordered.append(tok)
        self._tokens = tuple(ordered)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        """Collect tokens in order of first appearance."""
        return cls(tok for line in lines for tok in line.split())

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def check(self, ids: TokenSeq) -> None:
        n = len(self._tokens)
        for i in ids:
            if not 0 <= i < n:
                raise ValueError(f"token id {i} outside vocabulary of size {n}")

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [UNK, EOT]:
            raise ValueError(f"{path}: vocabulary file must start with {UNK} and {EOT}")
        return cls(lines[2:])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(tok) for tok in text.split()]


def detokenize(ids: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in ids)


class ProbDist:
    """Full-support probability vector over a vocabulary.

    Instances are immutable; ``probs`` and ``log_probs`` are read-only arrays.
    Build one with :func:`dist_normalize` unless the vector is already a valid
    floored distribution.
    """

    __slots__ = ("_probs", "_log_probs")

    def __init__(self, probs: np.ndarray | Sequence[float]):
        arr = np.array(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("distribution must be a non-empty 1-d vector")
        # Dividing floored entries by a sum slightly above 1 lands a hair under FLOOR.
        if not np.all(np.isfinite(arr)) or arr.min() < FLOOR * (1.0 - 1e-6):
            raise ValueError("distribution entries must be finite and >= FLOOR")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"distribution sums to {arr.sum()!r}, not 1")
        arr.setflags(write=False)
        self._probs = arr
        self._log_probs = None

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def log_probs(self) -> np.ndarray:
        if self._log_probs is None:
            lp = np.log(self._probs)
            lp.setflags(write=False)
            self._log_probs = lp
        return self._log_probs

    def __len__(self) -> int:
        return self._probs.size

    def __getitem__(self, idx: int) -> float:
        return float(self._probs[idx])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ProbDist) and np.array_equal(self._probs, other._probs)

    __hash__ = None

    def __repr__(self) -> str:
        return f"ProbDist(size={len(self)}, argmax={self.argmax()})"

    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest id on ties.
        return int(np.argmax(self._probs))


def dist_normalize(raw: np.ndarray | Sequence[float]) -> ProbDist:
    """Scale a nonnegative vector to unit mass, floor it at FLOOR and renormalize."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(arr > 0):
        raise ValueError("degenerate distribution")
    # Pre-scaling keeps the floor meaningful for inputs far from unit mass.
    floored = np.maximum(arr / arr.sum(), FLOOR)
    return ProbDist(floored / floored.sum())


def dist_entropy(p: ProbDist) -> float:
    """Shannon entropy in nats."""
    return float(max(0.0, -np.dot(p.probs, p.log_probs)))


def dist_top_k(p: ProbDist, k: int) -> list[tuple[int, float]]:
    """The ``k`` most probable ids, descending by probability, ties by ascending id."""
    n = len(p)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    # lexsort sorts by the last key first: -prob, then id.
    order = np.lexsort((np.arange(n), -p.probs))[:k]
    return [(int(i), float(p.probs[i])) for i in order]


def uniform_dist(size: int) -> ProbDist:
    return ProbDist(np.full(size, 1.0 / size))


def max_entropy(size: int) -> float:
    return math.log(size)
