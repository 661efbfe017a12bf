"""Small on-disk experiment used by the experiment, CLI and acceptance tests."""

import random
from pathlib import Path

from fixture_lms import CYCLE, FILLER

CONFIG = """\
[run]
seed = {seed}
out = out
max_new_tokens = 24
workers = {workers}

[corpus]
train = train.txt
test = test.txt
prefix_len = 4
num_instances = 8

[backend]
type = ngram
order = 3
add_k = 0.1

[sweep]
k = 3,5
alpha = 0.5:1.0:0.25
mode = softmax

[mauve]
num_clusters = 4
kmeans_restarts = 2

[decoder greedy]
algorithm = greedy

[decoder nucleus]
algorithm = nucleus
top_p = 0.9

[decoder lookback]
algorithm = lookback
k = 5
alpha = 0.5
"""


def _lines(seed, n):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        if i % 2 == 0:
            r = rng.randrange(len(CYCLE))
            out.append(" ".join((CYCLE[r:] + CYCLE[:r]) * 4))
        else:
            out.append(" ".join(rng.choice(FILLER + CYCLE) for _ in range(16)))
    return out


def write_experiment(root: Path, seed: int = 0, workers: int = 1) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "train.txt").write_text("\n".join(_lines(0, 120)) + "\n", encoding="utf-8")
    (root / "test.txt").write_text("\n".join(_lines(1, 40)) + "\n", encoding="utf-8")
    cfg = root / "exp.ini"
    cfg.write_text(CONFIG.format(seed=seed, workers=workers), encoding="utf-8")
    return cfg
