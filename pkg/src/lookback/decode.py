"""Decoding strategies: greedy, truncation sampling, contrastive search and look-back.

Every decoder runs the same step loop and records per-step KL signals, so
diagnostics are available for any of them. Randomness comes from numpy's
PCG64 generator seeded with ``DecodeConfig.seed``; a draw ``u = rng.random()``
is mapped to a token by inverse CDF over the allowed ids in ascending id order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from lookback.core import EOT_ID, ProbDist, TokenSeq, Vocabulary, dist_entropy, dist_normalize, dist_top_k
from lookback.divergence import DistHistory, StepSignals, lookahead_prefix_kl, step_signals
from lookback.lm import has_representation

ALGORITHMS = ("greedy", "nucleus", "typical", "eta", "contrastive", "lookback")
MODES = ("uniform", "softmax")
SUMMARY_TOP = 5
RECORD_SCHEMA = 1
# Cumulative-mass comparisons tolerate rounding in the running sum.
MASS_TOL = 1e-12


@dataclass(frozen=True)
class DecodeConfig:
    algorithm: str = "greedy"
    max_new_tokens: int = 256
    seed: int = 0
    top_p: float = 0.95
    tau: float = 0.92
    eta: float = 0.0003
    k: int = 5
    alpha: float = 0.5
    mode: str = "softmax"
    alpha_cs: float = 0.6
    history_includes_prefix: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.alpha_cs <= 1:
            raise ValueError("alpha_cs must be in [0, 1]")
        if math.isnan(self.alpha):
            raise ValueError("alpha must be a number")

    def label(self) -> str:
        """Short, stable name of the decoder and its relevant hyperparameters."""
        a = self.algorithm
        if a == "nucleus":
            return f"nucleus(p={self.top_p:g})"
        if a == "typical":
            return f"typical(tau={self.tau:g})"
        if a == "eta":
            return f"eta(eta={self.eta:g})"
        if a == "contrastive":
            return f"contrastive(k={self.k},alpha={self.alpha_cs:g})"
        if a == "lookback":
            return f"lookback(k={self.k},alpha={self.alpha:g},mode={self.mode})"
        return a

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DecodeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown decode config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class StepRecord:
    token: int
    entropy: float
    top: tuple[tuple[int, float], ...]
    signals: StepSignals
    candidates: tuple[tuple[int, float], ...] = ()
    candidate_kls: tuple[float, ...] = ()

    @property
    def alarm(self) -> bool:
        return self.signals.alarm


@dataclass
class GenerationRecord:
    prefix: list[int]
    continuation: list[int]
    steps: list[StepRecord]
    config: DecodeConfig
    backend: str
    # Full step distributions; kept in memory for diagnostics, not serialized.
    dists: list[ProbDist] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self, vocab: Vocabulary | None = None) -> dict:
        out = {
            "schema": RECORD_SCHEMA,
            "backend": self.backend,
            "config": self.config.to_dict(),
            "prefix": list(self.prefix),
            "continuation": list(self.continuation),
        }
        if vocab is not None:
            out["prefix_text"] = [vocab.token_of(i) for i in self.prefix]
            out["continuation_text"] = [vocab.token_of(i) for i in self.continuation]
        out["steps"] = [
            {
                "token": s.token,
                "entropy": s.entropy,
                "top": [list(pair) for pair in s.top],
                "kl_min_history": _finite_or_none(s.signals.kl_min_history),
                "argmin_history": s.signals.argmin_history,
                "kl_min_prefix": s.signals.kl_min_prefix,
                "alarm": s.signals.alarm,
                "candidates": [list(pair) for pair in s.candidates],
                "candidate_kls": list(s.candidate_kls),
            }
            for s in self.steps
        ]
        return out

    def to_json(self, vocab: Vocabulary | None = None) -> str:
        return json.dumps(self.to_dict(vocab), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationRecord":
        if data.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        steps = [
            StepRecord(
                token=s["token"],
                entropy=s["entropy"],
                top=tuple((int(i), float(p)) for i, p in s["top"]),
                signals=StepSignals(
                    math.inf if s["kl_min_history"] is None else s["kl_min_history"],
                    s["argmin_history"],
                    s["kl_min_prefix"],
                    s["alarm"],
                ),
                candidates=tuple((int(i), float(p)) for i, p in s["candidates"]),
                candidate_kls=tuple(s["candidate_kls"]),
            )
            for s in data["steps"]
        ]
        return cls(
            prefix=list(data["prefix"]),
            continuation=list(data["continuation"]),
            steps=steps,
            config=DecodeConfig.from_dict(data["config"]),
            backend=data["backend"],
        )


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_inverse_cdf(ids: Sequence[int], probs: Sequence[float], u: float) -> int:
    """Map a uniform draw ``u`` in [0, 1) to an id, scanning ids in ascending order."""
    order = np.argsort(np.asarray(ids), kind="stable")
    ids_sorted = np.asarray(ids)[order]
    cum = np.cumsum(np.asarray(probs, dtype=np.float64)[order])
    pos = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return int(ids_sorted[min(pos, len(ids_sorted) - 1)])


def softmax_neg(values: Sequence[float]) -> list[float]:
    """softmax(-values), shifted by the minimum so nothing overflows."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("softmax_neg needs a non-empty list of finite values")
    w = np.exp(-(v - v.min()))
    return (w / w.sum()).tolist()


# Truncation rules. Each ``_keep_*`` returns a boolean mask over the vocabulary.

def _keep_nucleus(p: np.ndarray, top_p: float) -> np.ndarray:
    order = np.lexsort((np.arange(p.size), -p))
    cum = np.cumsum(p[order])
    n_keep = min(int(np.searchsorted(cum, top_p - MASS_TOL, side="left")) + 1, p.size)
    keep = np.zeros(p.size, dtype=bool)
    keep[order[:n_keep]] = True
    return keep


def _keep_typical(p: np.ndarray, tau: float) -> np.ndarray:
    log_p = np.log(p)
    entropy = -np.dot(p, log_p)
    deviation = np.abs(-log_p - entropy)
    order = np.lexsort((np.arange(p.size), deviation))
    cum = np.cumsum(p[order])
    n_keep = min(int(np.searchsorted(cum, tau - MASS_TOL, side="left")) + 1, p.size)
    keep = np.zeros(p.size, dtype=bool)
    keep[order[:n_keep]] = True
    return keep


def eta_threshold(p: ProbDist, eta: float) -> float:
    return min(eta, math.sqrt(eta) * math.exp(-dist_entropy(p)))


def _keep_eta(p: np.ndarray, eta: float) -> np.ndarray:
    entropy = -np.dot(p, np.log(p))
    theta = min(eta, math.sqrt(eta) * math.exp(-entropy))
    keep = p >= theta
    if not keep.any():
        keep[int(np.argmax(p))] = True
    return keep


def _truncated(p: ProbDist, keep: np.ndarray) -> ProbDist:
    return dist_normalize(np.where(keep, p.probs, 0.0))


def truncate_nucleus(p: ProbDist, top_p: float) -> ProbDist:
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    return _truncated(p, _keep_nucleus(p.probs, top_p))


def truncate_typical(p: ProbDist, tau: float) -> ProbDist:
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    return _truncated(p, _keep_typical(p.probs, tau))


def truncate_eta(p: ProbDist, eta: float) -> ProbDist:
    if eta <= 0:
        raise ValueError("eta must be > 0")
    return _truncated(p, _keep_eta(p.probs, eta))


TRUNCATIONS: dict[str, Callable[[np.ndarray, DecodeConfig], np.ndarray]] = {
    "nucleus": lambda p, cfg: _keep_nucleus(p, cfg.top_p),
    "typical": lambda p, cfg: _keep_typical(p, cfg.tau),
    "eta": lambda p, cfg: _keep_eta(p, cfg.eta),
}


def backend_id(lm) -> str:
    return getattr(lm, "name", None) or repr(lm)


# A step chooser gets (current dist, context, history, signals, rng) and returns
# (token, alarm, candidates, candidate_kls).
Chooser = Callable[[ProbDist, list, DistHistory, StepSignals, np.random.Generator], tuple]


def _run(lm, prefix: TokenSeq, config: DecodeConfig, choose: Chooser) -> GenerationRecord:
    prefix = [int(i) for i in prefix]
    if not prefix:
        raise ValueError("prefix must be non-empty")
    for i in prefix:
        if not 0 <= i < lm.vocab_size:
            raise ValueError(f"prefix token id {i} outside vocabulary")
    hist = DistHistory.from_prefix(lm, prefix, config.history_includes_prefix)
    rng = make_rng(config.seed)
    context = list(prefix)
    continuation: list[int] = []
    steps: list[StepRecord] = []
    dists: list[ProbDist] = []
    n_top = min(SUMMARY_TOP, lm.vocab_size)
    for _ in range(config.max_new_tokens):
        cur = lm.next_dist(context)
        signals = step_signals(cur, hist)
        token, alarm, candidates, kls = choose(cur, context, hist, signals, rng)
        steps.append(
            StepRecord(
                token=token,
                entropy=dist_entropy(cur),
                top=tuple(dist_top_k(cur, n_top)),
                signals=replace(signals, alarm=alarm),
                candidates=tuple(candidates),
                candidate_kls=tuple(kls),
            )
        )
        dists.append(cur)
        # Only the chosen step's distribution enters the history, never lookaheads.
        hist.append(cur)
        context.append(token)
        continuation.append(token)
        if token == EOT_ID:
            break
    return GenerationRecord(prefix, continuation, steps, config, backend_id(lm), dists)


def _greedy_choice(cur, context, hist, signals, rng):
    return cur.argmax(), False, (), ()


def decode_greedy(lm, prefix: TokenSeq, config: DecodeConfig | None = None) -> GenerationRecord:
    config = replace(config or DecodeConfig(), algorithm="greedy")
    return _run(lm, prefix, config, _greedy_choice)


def decode_sampling(
    lm, prefix: TokenSeq, config: DecodeConfig, truncation: str | None = None
) -> GenerationRecord:
    """Sample each step from a nucleus, typical or eta truncated distribution."""
    truncation = truncation or config.algorithm
    if truncation not in TRUNCATIONS:
        raise ValueError(f"unknown truncation {truncation!r}")
    config = replace(config, algorithm=truncation)
    keep_fn = TRUNCATIONS[truncation]

    def choose(cur, context, hist, signals, rng):
        keep = keep_fn(cur.probs, config)
        ids = np.flatnonzero(keep)
        token = sample_inverse_cdf(ids, cur.probs[ids], rng.random())
        return token, False, (), ()

    return _run(lm, prefix, config, choose)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def decode_contrastive(
    lm, prefix: TokenSeq, k: int | None = None, alpha_cs: float | None = None,
    config: DecodeConfig | None = None,
) -> GenerationRecord:
    """Contrastive search: trade model confidence against similarity to past steps.

    The representation of past token j is ``lm.representation(x_1..x_j)``; a
    candidate v is represented by ``lm.representation(x_<t + [v])``.
    """
    if not has_representation(lm):
        raise TypeError("contrastive search requires representations")
    config = config or DecodeConfig()
    config = replace(
        config,
        algorithm="contrastive",
        k=config.k if k is None else k,
        alpha_cs=config.alpha_cs if alpha_cs is None else alpha_cs,
    )
    if config.k > lm.vocab_size:
        raise ValueError(f"k={config.k} exceeds vocabulary size {lm.vocab_size}")
    past = [_unit(np.asarray(lm.representation(prefix[: j + 1]), dtype=np.float64)) for j in range(len(prefix))]
    a = config.alpha_cs

    def choose(cur, context, hist, signals, rng):
        cands = dist_top_k(cur, config.k)
        past_mat = np.stack(past)
        best, best_score = cands[0][0], -math.inf
        for v, prob in cands:
            rep = _unit(np.asarray(lm.representation(context + [v]), dtype=np.float64))
            penalty = float(np.max(past_mat @ rep))
            score = (1.0 - a) * prob - a * penalty
            if score > best_score:
                best, best_score = v, score
        past.append(_unit(np.asarray(lm.representation(context + [best]), dtype=np.float64)))
        return best, False, (), ()

    return _run(lm, prefix, config, choose)


def decode_lookback(
    lm, prefix: TokenSeq, k: int | None = None, alpha: float | None = None,
    mode: str | None = None, config: DecodeConfig | None = None,
) -> GenerationRecord:
    """Look-back decoding.

    Emit the argmax token unless the current distribution comes within
    ``alpha`` (KL, nats) of an earlier step. On that alarm, draw from the top-k
    tokens, argmax included: uniformly, or in ``softmax`` mode with weights
    softmax(-d_v) where d_v is the min KL between the distribution following
    ``v`` and the prefix distributions.
    """
    config = config or DecodeConfig()
    config = replace(
        config,
        algorithm="lookback",
        k=config.k if k is None else k,
        alpha=config.alpha if alpha is None else alpha,
        mode=config.mode if mode is None else mode,
    )
    if config.k > lm.vocab_size:
        raise ValueError(f"k={config.k} exceeds vocabulary size {lm.vocab_size}")

    def choose(cur, context, hist, signals, rng):
        if not signals.kl_min_history <= config.alpha:
            return cur.argmax(), False, (), ()
        cands = dist_top_k(cur, config.k)
        ids = [v for v, _ in cands]
        if config.mode == "uniform":
            kls: list[float] = []
            probs = [1.0 / len(ids)] * len(ids)
        else:
            kls = [lookahead_prefix_kl(lm, context, v, hist) for v in ids]
            probs = softmax_neg(kls)
        token = sample_inverse_cdf(ids, probs, rng.random())
        return token, True, list(zip(ids, probs)), kls

    return _run(lm, prefix, config, choose)


def decode(lm, prefix: TokenSeq, config: DecodeConfig) -> GenerationRecord:
    """Dispatch on ``config.algorithm``."""
    a = config.algorithm
    if a == "greedy":
        return decode_greedy(lm, prefix, config)
    if a in TRUNCATIONS:
        return decode_sampling(lm, prefix, config, a)
    if a == "contrastive":
        return decode_contrastive(lm, prefix, config=config)
    if a == "lookback":
        return decode_lookback(lm, prefix, config=config)
    raise ValueError(f"unknown algorithm {a!r}")


def strip_eot(ids: Sequence[int]) -> list[int]:
    """Tokens before the first ``<eot>``, which evaluation ignores."""
    ids = list(ids)
    return ids[: ids.index(EOT_ID)] if EOT_ID in ids else ids
