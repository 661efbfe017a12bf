"""Command-line entry point: ``lookback {train-lm,decode,evaluate,sweep,diagnose}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from lookback.core import tokenize
from lookback.decode import ALGORITHMS, MODES, DecodeConfig, GenerationRecord, decode, strip_eot
from lookback.experiment import (
    ExperimentConfig,
    _read_lines,
    build_backend,
    export_diagnostics,
    load_config,
    run_experiment,
    sweep_and_select,
)
from lookback.lm import load_model, save_model, train_ngram
from lookback.mauve import MauveConfig, mauve_from_embeddings
from lookback.metrics import TfidfEmbedder, cosine, diversity_from_reps, rep_n


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (INI)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output file or directory")


def _add_decoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="n-gram model file written by train-lm")
    p.add_argument("--decoder", choices=ALGORITHMS, default="greedy")
    p.add_argument("--max-new-tokens", type=int, default=256)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--tau", type=float, default=0.92)
    p.add_argument("--eta", type=float, default=0.0003)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.5, help="look-back KL threshold (nats)")
    p.add_argument("--mode", choices=MODES, default="softmax")
    p.add_argument("--alpha-cs", type=float, default=0.6, help="contrastive search penalty")
    p.add_argument(
        "--generated-history-only", action="store_true",
        help="exclude prefix steps from the look-back history",
    )


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(
        algorithm=args.decoder,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed or 0,
        top_p=args.top_p,
        tau=args.tau,
        eta=args.eta,
        k=args.k,
        alpha=args.alpha,
        mode=args.mode,
        alpha_cs=args.alpha_cs,
        history_includes_prefix=not args.generated_history_only,
    )


def _experiment_config(args) -> ExperimentConfig:
    if not args.config:
        raise SystemExit("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    for name in ("prefix_len", "num_instances", "max_new_tokens", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prefix-len", dest="prefix_len", type=int)
    p.add_argument("--num-instances", dest="num_instances", type=int)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--workers", type=int)


def cmd_train_lm(args) -> int:
    if not args.out:
        raise SystemExit("--out is required")
    lambdas = [float(x) for x in args.lambdas.split(",")] if args.lambdas else None
    model = train_ngram(_read_lines(args.corpus), args.order, args.add_k, lambdas)
    save_model(model, args.out)
    print(f"wrote {args.out}: order={model.order} |V|={model.vocab_size}")
    return 0


def _load_lm(args):
    if args.config:
        return build_backend(load_config(args.config))
    if not args.model:
        raise SystemExit("--model or --config is required")
    return load_model(args.model)


def cmd_decode(args) -> int:
    lm = _load_lm(args)
    config = _decode_config(args)
    prefixes = [args.prefix] if args.prefix else _read_lines(args.input)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for text in prefixes:
            rec = decode(lm, tokenize(text, lm.vocab), config)
            out.write(rec.to_json(lm.vocab) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_evaluate(args) -> int:
    if args.generations:
        return _evaluate_file(args)
    cfg = _experiment_config(args)
    result = run_experiment(cfg)
    print(result.metrics_path.read_text(encoding="utf-8"), end="")
    return 0


def _evaluate_file(args) -> int:
    """Metrics for an existing generations JSONL (and MAUVE if references are given)."""
    lm = _load_lm(args)
    records = [GenerationRecord.from_dict(json.loads(line)) for line in _read_lines(args.generations)]
    embedder = TfidfEmbedder(lm.vocab_size).fit(
        [r.prefix + r.continuation for r in records]
    )
    conts = [strip_eot(r.continuation) for r in records]
    reps = [float(np.mean([rep_n(c, n) for c in conts])) for n in (2, 3, 4)]
    coh = [cosine(embedder.embed(r.prefix), embedder.embed(c)) for r, c in zip(records, conts) if c]
    row = {
        "rep-2": 100 * reps[0], "rep-3": 100 * reps[1], "rep-4": 100 * reps[2],
        "diversity": diversity_from_reps(reps),
        "coherence": float(np.mean(coh)) if coh else float("nan"),
    }
    if args.references:
        refs = [tokenize(line, lm.vocab) for line in _read_lines(args.references)]
        row["mauve"] = mauve_from_embeddings(
            np.stack([embedder.embed(t) for t in refs]),
            np.stack([embedder.embed(c) for c in conts]),
            MauveConfig(),
        )
    print(",".join(row))
    print(",".join(f"{v:.4f}" for v in row.values()))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    result = sweep_and_select(cfg)
    print(f"human rep-2: {100 * result.human_rep2:.2f}")
    print(f"selected: {result.selected.label()}")
    print(f"grid written to {result.path}")
    return 0


def cmd_diagnose(args) -> int:
    lm = _load_lm(args)
    out = args.out or "diagnostics"
    if args.record:
        lines = _read_lines(args.record)
        rec = GenerationRecord.from_dict(json.loads(lines[args.index]))
    else:
        if not args.prefix:
            raise SystemExit("--prefix or --record is required")
        rec = decode(lm, tokenize(args.prefix, lm.vocab), _decode_config(args))
    paths = export_diagnostics(rec, out, lm=lm, normalize=args.normalize)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lookback", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-lm", help="train an n-gram model on a line corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--add-k", type=float, default=0.1)
    p.add_argument("--lambdas", help="comma-separated interpolation weights, lowest order first")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", help="continue prefixes and write generation records (JSONL)")
    _add_common(p)
    _add_decoder_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prefix", help="a single prefix text")
    src.add_argument("--input", help="file with one prefix per line")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="run an experiment, or score an existing generations file")
    _add_common(p)
    _add_experiment_flags(p)
    p.add_argument("--generations", help="generations JSONL to score instead of running")
    p.add_argument("--references", help="human continuations, one per line, for MAUVE")
    p.add_argument("--model", help="model file providing the vocabulary")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="look-back (k, alpha) sweep on the validation split")
    _add_common(p)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="export KL heatmap and min-KL curves for one generation")
    _add_common(p)
    _add_decoder_flags(p)
    p.add_argument("--prefix", help="prefix text to decode")
    p.add_argument("--record", help="generations JSONL to read a record from")
    p.add_argument("--index", type=int, default=0, help="line of --record to use")
    p.add_argument("--normalize", action="store_true", help="add min-max normalized curve columns")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
