"""Conditional language models: an interpolated add-k n-gram model and a remote log-prob client."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from lookback.core import EOT_ID, ProbDist, TokenSeq, Vocabulary, dist_normalize, tokenize

logger = logging.getLogger(__name__)

MODEL_FORMAT = "lookback-ngram"
MODEL_VERSION = 1


class LMError(RuntimeError):
    """Base class for backend failures."""


class RetryableLMError(LMError):
    """Transient failure (network, timeout) that persisted through all retries."""


class FatalLMError(LMError):
    """The backend answered with something unusable."""


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@runtime_checkable
class ConditionalLM(Protocol):
    """Anything that maps a context to a next-token :class:`ProbDist`.

    ``next_dist`` must be a pure function of the context. Backends that can
    also embed a context expose ``representation``; contrastive search needs it.
    """

    vocab_size: int

    def next_dist(self, context: TokenSeq) -> ProbDist: ...


def has_representation(lm: object) -> bool:
    return callable(getattr(lm, "representation", None))


class NGramModel:
    """Interpolated add-k smoothed n-gram model.

    For each order ``o`` the context is cut to its last ``o - 1`` tokens and
    the level contributes ``(count + add_k) / (total + add_k * |V|)``. Levels
    whose context is longer than what is available are dropped and the
    remaining interpolation weights renormalized, so the empty context gives
    the smoothed unigram.
    """

    def __init__(
        self,
        order: int,
        vocab: Vocabulary,
        counts: dict[tuple[int, ...], dict[int, int]],
        lambdas: Sequence[float],
        add_k: float,
    ):
        if order < 1:
            raise ValueError("order must be >= 1")
        if add_k <= 0:
            raise ValueError("add_k must be > 0")
        lambdas = tuple(float(x) for x in lambdas)
        if len(lambdas) != order or any(x < 0 for x in lambdas) or abs(sum(lambdas) - 1.0) > 1e-9:
            raise ValueError(f"lambdas must be {order} nonnegative weights summing to 1")
        self.order = order
        self.vocab = vocab
        self.lambdas = lambdas
        self.add_k = float(add_k)
        self._counts: dict[tuple[int, ...], dict[int, int]] = {}
        self._tables: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, int]] = {}
        for ctx, table in counts.items():
            ctx = tuple(int(i) for i in ctx)
            if len(ctx) >= order:
                raise ValueError(f"context {ctx} too long for order {order}")
            table = {int(t): int(c) for t, c in table.items() if c}
            if not table:
                continue
            vocab.check(ctx)
            vocab.check(table)
            self._counts[ctx] = table
            ids = np.fromiter(sorted(table), dtype=np.intp)
            cnt = np.array([table[i] for i in ids], dtype=np.float64)
            self._tables[ctx] = (ids, cnt, int(cnt.sum()))
        self._dist_cache = lru_cache(maxsize=1 << 16)(self._compute_dist)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def counts(self) -> dict[tuple[int, ...], dict[int, int]]:
        return self._counts

    def _level(self, ctx: tuple[int, ...]) -> np.ndarray:
        v = self.vocab_size
        ids, cnt, total = self._tables.get(ctx, (None, None, 0))
        denom = total + self.add_k * v
        out = np.full(v, self.add_k / denom)
        if ids is not None:
            out[ids] += cnt / denom
        return out

    def _compute_dist(self, ctx: tuple[int, ...]) -> ProbDist:
        levels = [o for o in range(1, self.order + 1) if o - 1 <= len(ctx)]
        weight = sum(self.lambdas[o - 1] for o in levels)
        if weight <= 0:
            levels, weight = [1], 1.0
            scale = {1: 1.0}
        else:
            scale = {o: self.lambdas[o - 1] / weight for o in levels}
        mix = np.zeros(self.vocab_size)
        for o in levels:
            if scale[o] > 0:
                sub = ctx[len(ctx) - (o - 1):] if o > 1 else ()
                mix += scale[o] * self._level(sub)
        return dist_normalize(mix)

    def next_dist(self, context: TokenSeq) -> ProbDist:
        keep = self.order - 1
        ctx = tuple(context[-keep:]) if keep else ()
        return self._dist_cache(ctx)

    def representation(self, context: TokenSeq) -> np.ndarray:
        """The next-token distribution as a vector; stands in for hidden states."""
        return self.next_dist(context).probs

    def __repr__(self) -> str:
        return f"NGramModel(order={self.order}, |V|={self.vocab_size}, add_k={self.add_k})"


def train_ngram(
    corpus: Iterable[str],
    order: int = 3,
    add_k: float = 0.1,
    lambdas: Sequence[float] | None = None,
    vocab: Vocabulary | None = None,
) -> NGramModel:
    """Count all n-grams up to ``order`` in a line corpus, ``<eot>`` appended per line.

    ``vocab`` defaults to the corpus tokens in order of first appearance.
    """
    lines = [line.split() for line in corpus]
    lines = [toks for toks in lines if toks]
    if not lines:
        raise ValueError("empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    if vocab is None:
        vocab = Vocabulary(tok for toks in lines for tok in toks)
    if lambdas is None:
        lambdas = [1.0 / order] * order
    counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    for toks in lines:
        ids = tokenize(" ".join(toks), vocab) + [EOT_ID]
        for i, tok in enumerate(ids):
            for o in range(1, order + 1):
                if i >= o - 1:
                    counts[tuple(ids[i - o + 1:i])][tok] += 1
    return NGramModel(order, vocab, counts, lambdas, add_k)


# Model file: UTF-8 JSON object
#   {"format": "lookback-ngram", "version": 1, "order": int, "add_k": float,
#    "lambdas": [float], "vocab": [str], "counts": [[[ctx ids], [[id, count], ...]], ...]}
# vocab[0:2] are the reserved <unk>, <eot>; counts are sorted by context for stable output.

def save_model(model: NGramModel, path: str | Path) -> None:
    if not str(path):
        raise ValueError("empty model path")
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "order": model.order,
        "add_k": model.add_k,
        "lambdas": list(model.lambdas),
        "vocab": list(model.vocab.tokens),
        "counts": [
            [list(ctx), [[t, c] for t, c in sorted(table.items())]]
            for ctx, table in sorted(model.counts.items(), key=lambda kv: (len(kv[0]), kv[0]))
        ],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")), encoding="utf-8")


def load_model(path: str | Path) -> NGramModel:
    if not str(path):
        raise ValueError("empty model path")
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("model file is not UTF-8", exc.start) from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ModelFormatError(f"malformed model file: {exc.msg}", offset) from exc
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a lookback n-gram model file", 0)
    if payload.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"model file version {payload.get('version')!r}, expected {MODEL_VERSION}"
        )
    try:
        tokens = payload["vocab"]
        vocab = Vocabulary(tokens[2:])
        if list(vocab.tokens) != tokens:
            raise ModelFormatError("vocabulary section is inconsistent")
        counts = {tuple(ctx): {int(t): int(c) for t, c in table} for ctx, table in payload["counts"]}
        return NGramModel(
            int(payload["order"]), vocab, counts, payload["lambdas"], float(payload["add_k"])
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model file contents: {exc}") from exc


@dataclass(frozen=True)
class RemoteLMConfig:
    endpoint: str
    vocab_size: int
    top_n: int = 20
    timeout: float = 10.0
    retries: int = 3
    # Some servers reject an empty context; prefix tracking then starts at position 2.
    allow_empty_context: bool = True

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover the reserved tokens")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def _request_logprobs(cfg: RemoteLMConfig, context: TokenSeq, session=None) -> object:
    body = {"context": [int(i) for i in context], "top_n": cfg.top_n}
    post = session.post if session is not None else requests.post
    attempts = cfg.retries + 1
    last: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            resp = post(cfg.endpoint, json=body, timeout=cfg.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = exc
        else:
            if resp.status_code >= 500 or resp.status_code == 429:
                last = LMError(f"HTTP {resp.status_code}")
            elif resp.status_code != 200:
                raise FatalLMError(f"{cfg.endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
            else:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise FatalLMError(f"{cfg.endpoint}: response is not JSON") from exc
        logger.debug("attempt %d/%d to %s failed: %s", attempt, attempts, cfg.endpoint, last)
        if attempt < attempts:
            time.sleep(min(0.05 * 2 ** (attempt - 1), 1.0))
    raise RetryableLMError(f"{cfg.endpoint}: giving up after {attempts} attempts: {last}")


def logprobs_to_dist(pairs: object, vocab_size: int) -> ProbDist:
    """Turn ``[[id, logprob], ...]`` into a full distribution.

    Mass not covered by the listed ids is spread uniformly over the others.
    """
    if not isinstance(pairs, list) or not pairs:
        raise FatalLMError("malformed response: 'logprobs' must be a non-empty list")
    probs = np.zeros(vocab_size)
    listed = np.zeros(vocab_size, dtype=bool)
    for item in pairs:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise FatalLMError(f"malformed response entry {item!r}")
        idx, lp = item
        if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < vocab_size:
            raise FatalLMError(f"malformed response: token id {idx!r} out of range")
        if not isinstance(lp, (int, float)) or math.isnan(lp) or lp > 1e-9:
            raise FatalLMError(f"malformed response: log-prob {lp!r} for id {idx}")
        if listed[idx]:
            raise FatalLMError(f"malformed response: duplicate id {idx}")
        listed[idx] = True
        probs[idx] = math.exp(min(lp, 0.0))
    tail = 1.0 - probs.sum()
    if tail < -1e-6:
        raise FatalLMError(f"inconsistent server: listed probabilities sum to {1.0 - tail:.6f}")
    n_unlisted = vocab_size - int(listed.sum())
    if tail > 0 and n_unlisted:
        probs[~listed] = tail / n_unlisted
    return dist_normalize(probs)


def remote_next_dist(cfg: RemoteLMConfig, context: TokenSeq, session=None) -> ProbDist:
    payload = _request_logprobs(cfg, context, session)
    if not isinstance(payload, dict) or "logprobs" not in payload:
        raise FatalLMError(f"{cfg.endpoint}: malformed response, missing 'logprobs'")
    return logprobs_to_dist(payload["logprobs"], cfg.vocab_size)


class RemoteLM:
    """HTTP backend. Distributions are approximate when ``top_n < |V|``."""

    def __init__(self, cfg: RemoteLMConfig, vocab: Vocabulary | None = None):
        if vocab is not None and len(vocab) != cfg.vocab_size:
            raise ValueError("vocabulary size disagrees with the remote config")
        self.cfg = cfg
        self.vocab = vocab
        self._cache = lru_cache(maxsize=1 << 14)(self._fetch)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def allow_empty_context(self) -> bool:
        return self.cfg.allow_empty_context

    def _fetch(self, context: tuple[int, ...]) -> ProbDist:
        # requests.post opens a fresh connection per call, so concurrent calls share nothing.
        return remote_next_dist(self.cfg, context)

    def next_dist(self, context: TokenSeq) -> ProbDist:
        return self._cache(tuple(int(i) for i in context))

    def representation(self, context: TokenSeq) -> np.ndarray:
        return self.next_dist(context).probs

    def __repr__(self) -> str:
        return f"RemoteLM({self.cfg.endpoint!r}, top_n={self.cfg.top_n})"
