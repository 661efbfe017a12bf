"""Corpus ingestion, experiment runs, hyperparameter sweeps and diagnostics export.

Output schemas (version 1):

metrics.csv
    decoder, rep-2, rep-3, rep-4, diversity, mauve, coherence, status
    rep-n columns are x100; diversity is the product of (1 - mean rep-n);
    the first row is the human reference with an empty mauve cell.
generations.jsonl
    one GenerationRecord per line plus ``instance`` and ``decoder`` keys.
sweep.csv
    k, alpha, mode, rep2, mauve, human_rep2, rep2_distance, selected
    (full-precision floats, rep2 as a fraction).
heatmap.csv
    header ``step,0,1,...``; row i holds KL(step_i || step_j).
curves.csv
    step, kl_min_history, kl_min_prefix, alarm (+ ``*_norm`` columns when asked).
alarms.csv
    step, token, candidates (``id:prob`` joined by spaces), candidate_kls.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from lookback.core import Vocabulary, tokenize
from lookback.decode import DecodeConfig, GenerationRecord, decode, strip_eot
from lookback.divergence import minmax_normalize, pairwise_kl_matrix
from lookback.lm import LMError, NGramModel, RemoteLM, RemoteLMConfig, load_model, train_ngram
from lookback.mauve import MauveConfig, mauve_from_embeddings
from lookback.metrics import TfidfEmbedder, cosine, diversity_from_reps, rep_n

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ["decoder", "rep-2", "rep-3", "rep-4", "diversity", "mauve", "coherence", "status"]
SWEEP_COLUMNS = ["k", "alpha", "mode", "rep2", "mauve", "human_rep2", "rep2_distance", "selected"]


@dataclass(frozen=True)
class Instance:
    id: int
    prefix: tuple[str, ...]
    continuation: tuple[str, ...]


@dataclass
class Corpus:
    instances: list[Instance]
    skipped: int
    token_counts: Counter


def _read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    return [line for line in text.splitlines() if line.strip()]


def ingest_corpus(
    path: str | Path,
    prefix_len: int = 32,
    num_instances: int | None = 1000,
    seed: int = 0,
    writing_prompts: bool = False,
    exclude: Sequence[int] = (),
) -> Corpus:
    """Split each line into a prefix and the human continuation.

    With ``writing_prompts`` each line is ``prompt<TAB>story`` and the whole
    prompt is the prefix. Lines too short to leave a continuation are skipped.
    ``num_instances`` lines (by line number, minus ``exclude``) are sampled
    with ``seed``; ``None`` keeps all.
    """
    if prefix_len < 1:
        raise ValueError("prefix_len must be >= 1")
    usable: list[Instance] = []
    skipped = 0
    counts: Counter = Counter()
    excluded = set(exclude)
    for idx, line in enumerate(_read_lines(path)):
        if writing_prompts:
            prompt, _, story = line.partition("\t")
            prefix, cont = prompt.split(), story.split()
            ok = bool(prefix) and bool(cont)
        else:
            toks = line.split()
            prefix, cont = toks[:prefix_len], toks[prefix_len:]
            ok = len(toks) >= prefix_len + 1
        if not ok:
            skipped += 1
            continue
        counts.update(prefix)
        counts.update(cont)
        if idx not in excluded:
            usable.append(Instance(idx, tuple(prefix), tuple(cont)))
    if skipped:
        logger.info("%s: skipped %d lines shorter than prefix_len + 1", path, skipped)
    if not usable:
        raise ValueError(f"{path}: no usable instances")
    if num_instances is not None and num_instances < len(usable):
        picked = sorted(random.Random(seed).sample(range(len(usable)), num_instances))
        usable = [usable[i] for i in picked]
    return Corpus(usable, skipped, counts)


@dataclass
class BackendSpec:
    type: str = "ngram"
    model: str | None = None
    order: int = 3
    add_k: float = 0.1
    lambdas: tuple[float, ...] | None = None
    endpoint: str | None = None
    vocab: str | None = None
    top_n: int = 20
    timeout: float = 10.0
    retries: int = 3
    allow_empty_context: bool = True


@dataclass
class ExperimentConfig:
    train: str | None = None
    validation: str | None = None
    test: str | None = None
    backend: BackendSpec = field(default_factory=BackendSpec)
    decoders: list[DecodeConfig] = field(default_factory=lambda: [DecodeConfig()])
    prefix_len: int = 32
    num_instances: int = 1000
    max_new_tokens: int = 256
    seed: int = 0
    out: str = "results"
    workers: int = 1
    writing_prompts: bool = False
    sweep_k: tuple[int, ...] = (5, 8, 10)
    sweep_alpha: tuple[float, ...] = tuple(round(0.5 + 0.1 * i, 10) for i in range(12))
    sweep_mode: str = "softmax"
    mauve: MauveConfig = field(default_factory=MauveConfig)

    def __post_init__(self):
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        if self.num_instances < 1:
            raise ValueError("num_instances must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_range(text: str) -> tuple[float, ...]:
    """``"0.5:1.6:0.1"`` (inclusive) or ``"0.5, 0.8"`` into a tuple of floats."""
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ValueError("range step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 10) for i in range(n))
    return tuple(float(x) for x in text.split(",") if x.strip())


_SECTION_KEYS = {
    "run": {"seed": int, "out": str, "max_new_tokens": int, "workers": int},
    "corpus": {
        "train": str, "validation": str, "test": str, "prefix_len": int,
        "num_instances": int, "writing_prompts": _parse_bool,
    },
    "backend": {
        "type": str, "model": str, "order": int, "add_k": float,
        "lambdas": lambda s: tuple(float(x) for x in s.split(",")),
        "endpoint": str, "vocab": str, "top_n": int, "timeout": float, "retries": int,
        "allow_empty_context": _parse_bool,
    },
    "sweep": {
        "k": lambda s: tuple(int(x) for x in s.split(",")),
        "alpha": parse_range,
        "mode": str,
    },
    "mauve": {
        "num_clusters": int, "kmeans_iters": int, "kmeans_restarts": int,
        "scaling": float, "grid_size": int, "epsilon": float, "seed": int,
    },
}
_DECODER_KEYS = {
    f.name: f.type for f in fields(DecodeConfig) if f.name not in ("seed", "max_new_tokens")
}


def _decoder_value(key: str, raw: str):
    if key in ("algorithm", "mode"):
        return raw.strip()
    if key == "k":
        return int(raw)
    if key == "history_includes_prefix":
        return _parse_bool(raw)
    return float(raw)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an INI-style experiment file; unknown sections or keys are errors.

    Decoders are sections named ``[decoder NAME]`` holding DecodeConfig keys.
    Relative paths are resolved against the config file's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with path.open(encoding="utf-8") as fh:
        parser.read_file(fh)
    base = path.parent
    values: dict[str, dict] = {}
    decoders: list[DecodeConfig] = []
    for section in parser.sections():
        items = dict(parser.items(section))
        if section.startswith("decoder"):
            unknown = set(items) - set(_DECODER_KEYS)
            if unknown:
                raise ValueError(f"[{section}]: unknown keys {sorted(unknown)}")
            decoders.append(DecodeConfig(**{k: _decoder_value(k, v) for k, v in items.items()}))
            continue
        if section not in _SECTION_KEYS:
            raise ValueError(f"unknown section [{section}]")
        spec = _SECTION_KEYS[section]
        unknown = set(items) - set(spec)
        if unknown:
            raise ValueError(f"[{section}]: unknown keys {sorted(unknown)}")
        values[section] = {k: spec[k](v) for k, v in items.items()}

    def resolve(p):
        if p is None:
            return None
        full = p if Path(p).is_absolute() else str(base / p)
        if not Path(full).exists():
            raise FileNotFoundError(f"{path}: referenced path {p} does not exist")
        return full

    run, corpus = values.get("run", {}), values.get("corpus", {})
    backend = BackendSpec(**values.get("backend", {}))
    backend.model = resolve(backend.model)
    backend.vocab = resolve(backend.vocab)
    sweep = values.get("sweep", {})
    out = run.get("out", "results")
    cfg = ExperimentConfig(
        train=resolve(corpus.get("train")),
        validation=resolve(corpus.get("validation")),
        test=resolve(corpus.get("test")),
        backend=backend,
        decoders=decoders or [DecodeConfig()],
        prefix_len=corpus.get("prefix_len", 32),
        num_instances=corpus.get("num_instances", 1000),
        writing_prompts=corpus.get("writing_prompts", False),
        max_new_tokens=run.get("max_new_tokens", 256),
        seed=run.get("seed", 0),
        out=out if Path(out).is_absolute() else str(base / out),
        workers=run.get("workers", 1),
        mauve=MauveConfig(**values.get("mauve", {})),
    )
    if "k" in sweep:
        cfg.sweep_k = sweep["k"]
    if "alpha" in sweep:
        cfg.sweep_alpha = sweep["alpha"]
    if "mode" in sweep:
        cfg.sweep_mode = sweep["mode"]
    return cfg


def build_backend(cfg: ExperimentConfig):
    spec = cfg.backend
    if spec.type == "ngram":
        if spec.model:
            return load_model(spec.model)
        if not cfg.train:
            raise ValueError("n-gram backend needs a model file or a training corpus")
        return train_ngram(_read_lines(cfg.train), spec.order, spec.add_k, spec.lambdas)
    if spec.type == "remote":
        if not spec.endpoint or not spec.vocab:
            raise ValueError("remote backend needs endpoint and vocab")
        vocab = Vocabulary.load(spec.vocab)
        return RemoteLM(
            RemoteLMConfig(
                spec.endpoint, len(vocab), spec.top_n, spec.timeout, spec.retries,
                spec.allow_empty_context,
            ),
            vocab,
        )
    raise ValueError(f"unknown backend type {spec.type!r}")


def instance_seed(seed: int, instance_id: int) -> int:
    """Per-instance seed so results do not depend on scheduling order."""
    return int(np.random.SeedSequence([seed, instance_id]).generate_state(1, np.uint64)[0])


@dataclass
class DecoderRun:
    config: DecodeConfig
    records: list[tuple[int, GenerationRecord]]
    complete: bool
    error: str | None = None


def decode_instances(
    lm, vocab: Vocabulary, instances: Sequence[Instance], config: DecodeConfig, seed: int, workers: int = 1
) -> DecoderRun:
    """Decode every instance; a backend failure stops the run and marks it partial."""

    def one(inst: Instance) -> tuple[int, GenerationRecord]:
        prefix = tokenize(" ".join(inst.prefix), vocab)
        return inst.id, decode(lm, prefix, replace(config, seed=instance_seed(seed, inst.id)))

    records: list[tuple[int, GenerationRecord]] = []
    error = None
    if workers == 1:
        for inst in instances:
            try:
                records.append(one(inst))
            except LMError as exc:
                error = str(exc)
                break
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(one, inst) for inst in instances]
            for fut in futures:
                try:
                    records.append(fut.result())
                except LMError as exc:
                    error = error or str(exc)
    if error:
        logger.warning("decoder %s aborted: %s", config.label(), error)
    records.sort(key=lambda pair: pair[0])
    return DecoderRun(config, records, error is None, error)


@dataclass
class MetricRow:
    decoder: str
    reps: tuple[float, float, float]
    diversity: float
    mauve: float | None
    coherence: float
    status: str = "ok"

    def csv_cells(self) -> list[str]:
        return [
            self.decoder,
            *(f"{100 * r:.2f}" for r in self.reps),
            f"{self.diversity:.4f}",
            "" if self.mauve is None else f"{self.mauve:.4f}",
            f"{self.coherence:.4f}",
            self.status,
        ]


def _safe_coherence(embedder, prefix, cont) -> float:
    # An empty continuation (immediate <eot>) has no embedding; score it 0.
    if not prefix or not cont:
        return 0.0
    return cosine(embedder.embed(prefix), embedder.embed(cont))


def score_texts(
    label: str,
    prefixes: Sequence[Sequence[int]],
    continuations: Sequence[Sequence[int]],
    embedder,
    human: Sequence[Sequence[int]] | None,
    mauve_cfg: MauveConfig,
    status: str = "ok",
) -> MetricRow:
    if not continuations:
        return MetricRow(label, (math.nan,) * 3, math.nan, None, math.nan, status)
    reps = tuple(float(np.mean([rep_n(c, n) for c in continuations])) for n in (2, 3, 4))
    coh = float(np.mean([_safe_coherence(embedder, p, c) for p, c in zip(prefixes, continuations)]))
    score = None
    if human is not None:
        score = mauve_from_embeddings(
            np.stack([embedder.embed(t) for t in human]),
            np.stack([embedder.embed(t) for t in continuations]),
            mauve_cfg,
        )
    return MetricRow(label, reps, diversity_from_reps(reps), score, coh, status)


@dataclass
class ExperimentResult:
    rows: list[MetricRow]
    runs: list[DecoderRun]
    metrics_path: Path
    generations_path: Path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _split_instances(cfg: ExperimentConfig, split: str) -> list[Instance]:
    """Test or validation instances; without a validation file, disjoint samples of the test file."""
    source = cfg.test if split == "test" or cfg.validation is None else cfg.validation
    if source is None:
        raise ValueError("config has no test corpus")
    test = ingest_corpus(source, cfg.prefix_len, cfg.num_instances, cfg.seed, cfg.writing_prompts)
    if split == "test" or cfg.validation is not None:
        return test.instances
    taken = [inst.id for inst in test.instances]
    try:
        return ingest_corpus(
            source, cfg.prefix_len, cfg.num_instances, cfg.seed + 1, cfg.writing_prompts, exclude=taken
        ).instances
    except ValueError:
        logger.warning("corpus too small for a disjoint validation split; reusing test instances")
        return test.instances


def _embedder_for(cfg: ExperimentConfig, lm, vocab: Vocabulary, instances: Sequence[Instance]) -> TfidfEmbedder:
    if cfg.train:
        docs = [tokenize(line, vocab) for line in _read_lines(cfg.train)]
    else:
        docs = [tokenize(" ".join(i.prefix + i.continuation), vocab) for i in instances]
    return TfidfEmbedder(len(vocab)).fit(docs)


def _evaluate_runs(
    cfg: ExperimentConfig, lm, vocab: Vocabulary, instances: Sequence[Instance], runs: Sequence[DecoderRun]
) -> tuple[MetricRow, list[MetricRow]]:
    embedder = _embedder_for(cfg, lm, vocab, instances)
    prefix_ids = {i.id: tokenize(" ".join(i.prefix), vocab) for i in instances}
    human_ids = {
        i.id: tokenize(" ".join(i.continuation[: cfg.max_new_tokens]), vocab) for i in instances
    }
    order = [i.id for i in instances]
    human_row = score_texts(
        "human", [prefix_ids[i] for i in order], [human_ids[i] for i in order], embedder, None, cfg.mauve
    )
    rows = []
    for run in runs:
        ids = [iid for iid, _ in run.records]
        conts = [strip_eot(rec.continuation) for _, rec in run.records]
        status = "ok" if run.complete else f"partial({len(ids)}/{len(instances)})"
        rows.append(
            score_texts(
                run.config.label(),
                [prefix_ids[i] for i in ids],
                conts,
                embedder,
                [human_ids[i] for i in order],
                cfg.mauve,
                status,
            )
        )
    return human_row, rows


def run_experiment(cfg: ExperimentConfig, lm=None) -> ExperimentResult:
    """Decode the test instances with every configured decoder and write the reports."""
    lm = lm if lm is not None else build_backend(cfg)
    vocab = lm.vocab
    instances = _split_instances(cfg, "test")
    runs = [
        decode_instances(lm, vocab, instances, replace(d, max_new_tokens=cfg.max_new_tokens), cfg.seed, cfg.workers)
        for d in cfg.decoders
    ]
    human_row, rows = _evaluate_runs(cfg, lm, vocab, instances, runs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    _write_csv(metrics_path, METRIC_COLUMNS, [r.csv_cells() for r in [human_row, *rows]])
    gen_path = out / "generations.jsonl"
    with gen_path.open("w", encoding="utf-8") as fh:
        for run in runs:
            for iid, rec in run.records:
                payload = {"instance": iid, "decoder": run.config.label(), **rec.to_dict(vocab)}
                fh.write(json.dumps(payload, ensure_ascii=False) + "\n")
    return ExperimentResult([human_row, *rows], runs, metrics_path, gen_path)


@dataclass
class SweepRow:
    k: int
    alpha: float
    mode: str
    rep2: float
    mauve: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    selected: DecodeConfig
    human_rep2: float
    path: Path | None = None


def select_config(rows: Sequence[SweepRow], human_rep2: float) -> SweepRow:
    """Closest rep-2 to the human reference, then highest MAUVE, then smaller alpha, then smaller k."""
    if not rows:
        raise ValueError("empty sweep grid")
    return min(rows, key=lambda r: (abs(r.rep2 - human_rep2), -r.mauve, r.alpha, r.k))


def sweep_and_select(
    cfg: ExperimentConfig,
    lm=None,
    grid: Sequence[tuple[int, float]] | None = None,
) -> SweepResult:
    """Evaluate every (k, alpha) look-back setting on the validation split and pick one."""
    if grid is None:
        grid = [(k, a) for k in cfg.sweep_k for a in cfg.sweep_alpha]
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    lm = lm if lm is not None else build_backend(cfg)
    vocab = lm.vocab
    instances = _split_instances(cfg, "validation")
    configs = [
        DecodeConfig(
            algorithm="lookback", k=k, alpha=a, mode=cfg.sweep_mode, max_new_tokens=cfg.max_new_tokens
        )
        for k, a in grid
    ]
    runs = [decode_instances(lm, vocab, instances, c, cfg.seed, cfg.workers) for c in configs]
    human_row, metric_rows = _evaluate_runs(cfg, lm, vocab, instances, runs)
    rows = [
        SweepRow(c.k, c.alpha, c.mode, m.reps[0], m.mauve if m.mauve is not None else math.nan)
        for c, m in zip(configs, metric_rows)
    ]
    human_rep2 = human_row.reps[0]
    best = select_config(rows, human_rep2)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    _write_csv(
        path,
        SWEEP_COLUMNS,
        [
            [r.k, repr(r.alpha), r.mode, repr(r.rep2), repr(r.mauve), repr(human_rep2),
             repr(abs(r.rep2 - human_rep2)), int(r is best)]
            for r in rows
        ],
    )
    selected = DecodeConfig(
        algorithm="lookback", k=best.k, alpha=best.alpha, mode=best.mode, max_new_tokens=cfg.max_new_tokens
    )
    return SweepResult(rows, selected, human_rep2, path)


def _fmt(x: float) -> str:
    return repr(x) if math.isfinite(x) else "inf"


def export_diagnostics(
    record: GenerationRecord, out_dir: str | Path, lm=None, normalize: bool = False
) -> dict[str, Path]:
    """Write the step KL heatmap, the min-KL curves and the alarm annotations.

    Records read back from JSONL carry no distributions; pass ``lm`` to
    recompute them.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create diagnostics directory {out}: {exc}") from exc
    dists = record.dists
    if not dists and record.steps:
        if lm is None:
            raise ValueError("record has no stored distributions; pass the language model")
        ctx = list(record.prefix)
        dists = []
        for tok in record.continuation:
            dists.append(lm.next_dist(ctx))
            ctx.append(tok)
    paths = {
        "heatmap": out / "heatmap.csv",
        "curves": out / "curves.csv",
        "alarms": out / "alarms.csv",
    }
    n = len(dists)
    matrix = pairwise_kl_matrix(dists) if n else np.zeros((0, 0))
    _write_csv(
        paths["heatmap"],
        ["step", *map(str, range(n))],
        [[i, *(_fmt(float(v)) for v in matrix[i])] for i in range(n)],
    )
    hist = [s.signals.kl_min_history for s in record.steps]
    pref = [s.signals.kl_min_prefix for s in record.steps]
    header = ["step", "kl_min_history", "kl_min_prefix", "alarm"]
    if normalize:
        header += ["kl_min_history_norm", "kl_min_prefix_norm"]
        norm = [minmax_normalize(hist), minmax_normalize(pref)]
    rows = []
    for i, s in enumerate(record.steps):
        row = [i, _fmt(hist[i]), _fmt(pref[i]), int(s.signals.alarm)]
        if normalize:
            row += [_fmt(norm[0][i]), _fmt(norm[1][i])]
        rows.append(row)
    _write_csv(paths["curves"], header, rows)
    _write_csv(
        paths["alarms"],
        ["step", "token", "candidates", "candidate_kls"],
        [
            [
                i,
                s.token,
                " ".join(f"{v}:{p!r}" for v, p in s.candidates),
                " ".join(repr(x) for x in s.candidate_kls),
            ]
            for i, s in enumerate(record.steps)
            if s.signals.alarm
        ],
    )
    return paths
