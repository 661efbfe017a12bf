"""Constructed corpora and models shared by the test suite.

cycle      order-3 model whose greedy path loops over "a b c d e f"; random
           filler lines give it plausible alternatives.
disjoint   two topics with disjoint vocabularies (no shared words).
hub        two topics joined by the shared words "the", "and", "." so that
           sampling can drift from one topic into the other.
"""

import random
from functools import lru_cache

from lookback import tokenize, train_ngram

CYCLE = "a b c d e f".split()
FILLER = [f"w{i}" for i in range(30)]


@lru_cache(maxsize=None)
def cycle_corpus():
    rng = random.Random(0)
    lines = [" ".join(CYCLE * 4) for _ in range(40)]
    lines += [" ".join(rng.choice(FILLER + CYCLE) for _ in range(12)) for _ in range(60)]
    return tuple(lines)


@lru_cache(maxsize=None)
def cycle_lm():
    return train_ngram(cycle_corpus(), order=3, add_k=0.1)


def cycle_prefixes(n=20):
    """Rotations of the cycle, then openings of filler lines."""
    lm = cycle_lm()
    lines = cycle_corpus()
    out = []
    for i in range(n):
        if i % 2 == 0:
            r = (i // 2) % len(CYCLE)
            out.append(tokenize(" ".join(CYCLE[r:] + CYCLE[:r]), lm.vocab)[:4])
        else:
            out.append(tokenize(lines[40 + i], lm.vocab)[:6])
    return out


def _topic_lines(nwords, nlines, seed, hub):
    rng = random.Random(seed)
    a = [f"a{i}" for i in range(nwords)]
    b = [f"b{i}" for i in range(nwords)]

    def sentence(ws):
        if hub:
            return f"the {rng.choice(ws)} {rng.choice(ws)} and the {rng.choice(ws)} ."
        return " ".join(rng.choice(ws) for _ in range(6))

    return tuple(
        " ".join(sentence(a if i % 2 == 0 else b) for _ in range(4)) for i in range(nlines)
    )


@lru_cache(maxsize=None)
def disjoint_corpus():
    return _topic_lines(10, 200, 1, hub=False)


@lru_cache(maxsize=None)
def disjoint_lm():
    return train_ngram(disjoint_corpus(), order=3, add_k=0.1, lambdas=[0.05, 0.15, 0.8])


@lru_cache(maxsize=None)
def hub_corpus():
    return _topic_lines(4, 1000, 2, hub=True)


@lru_cache(maxsize=None)
def hub_lm():
    return train_ngram(hub_corpus(), order=3, add_k=0.1, lambdas=[0.05, 0.15, 0.8])


def hub_prefixes(n=20):
    lm = hub_lm()
    lines = hub_corpus()
    return [tokenize(lines[2 * i], lm.vocab)[:16] for i in range(n)]


def fixture_suite():
    """20 (model, prefix) pairs: 10 on the cycle model, 10 on the hub model."""
    suite = [(cycle_lm(), p) for p in cycle_prefixes(10)]
    suite += [(hub_lm(), p) for p in hub_prefixes(10)]
    return suite
