"""KL-divergence signals between the current step and earlier steps or the prefix."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lookback import kernels
from lookback.core import FLOOR, ProbDist, TokenSeq

INF = math.inf


def _as_probs(p: ProbDist | np.ndarray | Sequence[float]) -> np.ndarray:
    if isinstance(p, ProbDist):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def kl_divergence(p: ProbDist | np.ndarray, q: ProbDist | np.ndarray) -> float:
    """KL(p || q) in nats, with ``q`` floored at FLOOR."""
    pa, qa = _as_probs(p), _as_probs(q)
    if pa.shape != qa.shape:
        raise ValueError(f"length mismatch: {pa.shape[0]} vs {qa.shape[0]}")
    log_p = p.log_probs if isinstance(p, ProbDist) else np.log(np.maximum(pa, FLOOR))
    log_q = q.log_probs if isinstance(q, ProbDist) else np.log(np.maximum(qa, FLOOR))
    return float(kernels.kl_rows(pa, log_p, log_q[None, :])[0])


class DistHistory:
    """Distributions seen so far in one generation.

    ``prefix_dists[j]`` is p(. | x_1..x_j), i.e. the distribution at prefix
    position j + 1; ``dists`` gets one entry per generated step. Rows are
    kept as log-probabilities in a growing buffer for the KL kernels.
    """

    def __init__(self, prefix_dists: Sequence[ProbDist], history_includes_prefix: bool = True):
        if not prefix_dists:
            raise ValueError("need at least one prefix distribution")
        self.prefix_dists: tuple[ProbDist, ...] = tuple(prefix_dists)
        self.history_includes_prefix = history_includes_prefix
        self.dists: list[ProbDist] = []
        self._v = len(prefix_dists[0])
        self._prefix_log = np.ascontiguousarray(np.stack([d.log_probs for d in prefix_dists]))
        m = len(prefix_dists)
        self._log = np.empty((max(2 * m, 64), self._v))
        self._log[:m] = self._prefix_log
        self._m = m
        self._n = m

    @classmethod
    def from_prefix(cls, lm, prefix: TokenSeq, history_includes_prefix: bool = True) -> "DistHistory":
        """Collect p(. | x_<j) for every prefix position j.

        Backends flagged ``allow_empty_context = False`` skip position 1.
        """
        start = 0 if getattr(lm, "allow_empty_context", True) else 1
        dists = [lm.next_dist(prefix[:j]) for j in range(start, len(prefix))]
        if not dists:
            raise ValueError("prefix too short to yield any prefix distribution")
        return cls(dists, history_includes_prefix)

    def __len__(self) -> int:
        return len(self.dists)

    @property
    def vocab_size(self) -> int:
        return self._v

    def append(self, dist: ProbDist) -> None:
        if len(dist) != self._v:
            raise ValueError("length mismatch")
        if self._n == self._log.shape[0]:
            grown = np.empty((2 * self._n, self._v))
            grown[: self._n] = self._log[: self._n]
            self._log = grown
        self._log[self._n] = dist.log_probs
        self._n += 1
        self.dists.append(dist)

    def history_log_rows(self) -> np.ndarray:
        lo = 0 if self.history_includes_prefix else self._m
        return self._log[lo:self._n]

    def snapshot(self) -> "DistHistory":
        """An independent copy for read-only diagnostics while decoding continues."""
        twin = DistHistory(self.prefix_dists, self.history_includes_prefix)
        for d in self.dists:
            twin.append(d)
        return twin


@dataclass(frozen=True)
class StepSignals:
    kl_min_history: float
    argmin_history: int
    kl_min_prefix: float
    alarm: bool = False


def min_kl_history(current: ProbDist, hist: DistHistory) -> tuple[float, int]:
    """Smallest KL(current || h) over the history and the earliest index reaching it.

    Indices count prefix positions first when the history includes the prefix.
    An empty history returns ``(inf, -1)`` so no alarm can fire.
    """
    rows = hist.history_log_rows()
    if rows.shape[0] == 0:
        return INF, -1
    kls = kernels.kl_rows(current.probs, current.log_probs, rows)
    j = int(np.argmin(kls))
    return float(kls[j]), j


def min_kl_prefix(current: ProbDist, hist: DistHistory) -> float:
    kls = kernels.kl_rows(current.probs, current.log_probs, hist._prefix_log)
    return float(kls.min())


def lookahead_prefix_kl(lm, context: TokenSeq, candidate: int, hist: DistHistory) -> float:
    """Min KL to the prefix of the distribution that follows ``context + [candidate]``."""
    if not 0 <= candidate < hist.vocab_size:
        raise ValueError(f"candidate {candidate} outside vocabulary")
    nxt = lm.next_dist(list(context) + [candidate])
    return min_kl_prefix(nxt, hist)


def step_signals(current: ProbDist, hist: DistHistory, alpha: float | None = None) -> StepSignals:
    value, idx = min_kl_history(current, hist)
    alarm = alpha is not None and value <= alpha
    return StepSignals(value, idx, min_kl_prefix(current, hist), alarm)


def pairwise_kl_matrix(dists: Sequence[ProbDist | np.ndarray]) -> np.ndarray:
    if not dists:
        raise ValueError("need at least one distribution")
    probs = np.ascontiguousarray(np.stack([_as_probs(d) for d in dists]))
    logs = np.ascontiguousarray(
        np.stack([d.log_probs if isinstance(d, ProbDist) else np.log(np.maximum(d, FLOOR)) for d in dists])
    )
    return kernels.pairwise_kl(probs, logs)


def minmax_normalize(values: Sequence[float]) -> list[float]:
    """Per-sequence min-max scaling of finite values, for plotting only; inf stays inf."""
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return list(values)
    lo, hi = min(finite), max(finite)
    span = hi - lo
    return [v if not math.isfinite(v) else (0.0 if span == 0 else (v - lo) / span) for v in values]
