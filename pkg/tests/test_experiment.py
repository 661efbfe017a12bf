import csv
import json
import math

import numpy as np
import pytest

from exp_helpers import write_experiment
from fixture_lms import cycle_lm, cycle_prefixes
from lookback.cli import main
from lookback.decode import DecodeConfig, GenerationRecord, decode_greedy, decode_lookback
from lookback.experiment import (
    METRIC_COLUMNS,
    SWEEP_COLUMNS,
    SweepRow,
    export_diagnostics,
    ingest_corpus,
    instance_seed,
    load_config,
    parse_range,
    run_experiment,
    select_config,
    sweep_and_select,
)
from lookback.lm import FatalLMError, save_model, train_ngram


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestIngest:
    def test_prefix_split(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("a b c d e\nshort\n\nx y z w v u\n", encoding="utf-8")
        corpus = ingest_corpus(f, prefix_len=3, num_instances=None)
        assert [i.prefix for i in corpus.instances] == [("a", "b", "c"), ("x", "y", "z")]
        assert corpus.instances[1].continuation == ("w", "v", "u")
        assert corpus.skipped == 1
        assert corpus.token_counts["a"] == 1

    def test_exact_length_skipped(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("a b c\na b c d\n", encoding="utf-8")
        assert len(ingest_corpus(f, prefix_len=3, num_instances=None).instances) == 1

    def test_writing_prompts(self, tmp_path):
        f = tmp_path / "wp.txt"
        f.write_text("once upon\tthere was a dragon\nno story\t\n", encoding="utf-8")
        corpus = ingest_corpus(f, writing_prompts=True, num_instances=None)
        assert corpus.instances[0].prefix == ("once", "upon")
        assert corpus.skipped == 1

    def test_sampling_deterministic(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("\n".join(f"t{i} u v w" for i in range(50)), encoding="utf-8")
        a = ingest_corpus(f, prefix_len=2, num_instances=10, seed=3)
        b = ingest_corpus(f, prefix_len=2, num_instances=10, seed=3)
        assert a.instances == b.instances
        assert [i.id for i in a.instances] == sorted(i.id for i in a.instances)

    def test_no_usable(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("a\nb\n", encoding="utf-8")
        with pytest.raises(ValueError):
            ingest_corpus(f, prefix_len=4)

    def test_unreadable(self, tmp_path):
        with pytest.raises(OSError, match="cannot read corpus"):
            ingest_corpus(tmp_path / "missing.txt")


class TestConfig:
    def test_load(self, tmp_path):
        cfg = load_config(write_experiment(tmp_path))
        assert [d.algorithm for d in cfg.decoders] == ["greedy", "nucleus", "lookback"]
        assert cfg.decoders[1].top_p == 0.9
        assert cfg.sweep_alpha == (0.5, 0.75, 1.0)
        assert cfg.sweep_k == (3, 5)
        assert cfg.mauve.num_clusters == 4

    @pytest.mark.parametrize(
        "old,new",
        [("[run]\n", "[run]\nbogus = 1\n"), ("[mauve]\n", "[extras]\nx = 1\n[mauve]\n"),
         ("algorithm = greedy\n", "algorithm = greedy\nbeam = 4\n")],
    )
    def test_unknown_rejected(self, tmp_path, old, new):
        cfg = write_experiment(tmp_path)
        cfg.write_text(cfg.read_text().replace(old, new, 1))
        with pytest.raises(ValueError, match="unknown"):
            load_config(cfg)

    def test_missing_path(self, tmp_path):
        cfg = write_experiment(tmp_path)
        (tmp_path / "test.txt").unlink()
        with pytest.raises(FileNotFoundError):
            load_config(cfg)

    def test_parse_range(self):
        assert parse_range("0.5:1.6:0.1") == tuple(round(0.5 + 0.1 * i, 10) for i in range(12))
        assert parse_range("1, 2") == (1.0, 2.0)


def test_instance_seed_stable():
    assert instance_seed(0, 5) == instance_seed(0, 5)
    assert instance_seed(0, 5) != instance_seed(0, 6)


class TestRunExperiment:
    def test_report_shape(self, tmp_path):
        res = run_experiment(load_config(write_experiment(tmp_path)))
        rows = read_csv(res.metrics_path)
        assert list(rows[0]) == METRIC_COLUMNS
        assert [r["decoder"] for r in rows] == ["human", "greedy", "nucleus(p=0.9)", "lookback(k=5,alpha=0.5,mode=softmax)"]
        assert rows[0]["mauve"] == ""
        for r in rows[1:]:
            assert 0 < float(r["mauve"]) <= 1
            assert r["status"] == "ok"
            reps = [float(r[f"rep-{n}"]) / 100 for n in (2, 3, 4)]
            assert float(r["diversity"]) == pytest.approx(math.prod(1 - x for x in reps), abs=2e-4)
        lines = res.generations_path.read_text().splitlines()
        assert len(lines) == 3 * 8
        first = json.loads(lines[0])
        assert first["decoder"] == "greedy" and "instance" in first

    def test_greedy_repeats(self, tmp_path):
        res = run_experiment(load_config(write_experiment(tmp_path)))
        greedy = read_csv(res.metrics_path)[1]
        assert float(greedy["rep-4"]) > 60
        lookback = read_csv(res.metrics_path)[3]
        assert float(lookback["rep-4"]) < float(greedy["rep-4"])

    @pytest.mark.parametrize("workers", [1, 4])
    def test_deterministic(self, tmp_path, workers):
        outputs = []
        for name in ("a", "b"):
            cfg = load_config(write_experiment(tmp_path / name, workers=workers))
            res = run_experiment(cfg)
            outputs.append((res.metrics_path.read_bytes(), res.generations_path.read_bytes()))
        assert outputs[0] == outputs[1]

    def test_workers_do_not_change_output(self, tmp_path):
        a = run_experiment(load_config(write_experiment(tmp_path / "a", workers=1)))
        b = run_experiment(load_config(write_experiment(tmp_path / "b", workers=3)))
        assert a.generations_path.read_bytes() == b.generations_path.read_bytes()

    def test_backend_failure_marks_partial(self, tmp_path):
        cfg = load_config(write_experiment(tmp_path))
        real = train_ngram((tmp_path / "train.txt").read_text().splitlines(), 3, 0.1)

        class Flaky:
            vocab = real.vocab
            vocab_size = real.vocab_size
            calls = 0

            def next_dist(self, ctx):
                Flaky.calls += 1
                if Flaky.calls > 200:
                    raise FatalLMError("server went away")
                return real.next_dist(ctx)

        cfg.decoders = [DecodeConfig()]
        res = run_experiment(cfg, lm=Flaky())
        status = read_csv(res.metrics_path)[1]["status"]
        assert status.startswith("partial(") and status.endswith("/8)")


class TestSweep:
    def test_select_rules(self):
        rows = [
            SweepRow(5, 0.9, "softmax", 0.10, 0.5),
            SweepRow(8, 0.6, "softmax", 0.06, 0.4),
            SweepRow(5, 0.7, "softmax", 0.08, 0.7),  # same distance as the previous row
            SweepRow(10, 0.7, "softmax", 0.08, 0.7),
        ]
        assert select_config(rows, 0.07) is rows[2]

    def test_alpha_then_k_ties(self):
        rows = [SweepRow(8, 0.7, "softmax", 0.1, 0.5), SweepRow(5, 0.7, "softmax", 0.1, 0.5),
                SweepRow(5, 0.9, "softmax", 0.1, 0.5)]
        assert select_config(rows, 0.1) is rows[1]

    def test_empty(self):
        with pytest.raises(ValueError):
            select_config([], 0.1)

    def test_reselect_from_csv(self, tmp_path):
        cfg = load_config(write_experiment(tmp_path))
        res = sweep_and_select(cfg)
        rows = read_csv(res.path)
        assert list(rows[0]) == SWEEP_COLUMNS and len(rows) == 6
        human = float(rows[0]["human_rep2"])
        best = min(rows, key=lambda r: (abs(float(r["rep2"]) - human), -float(r["mauve"]), float(r["alpha"]), int(r["k"])))
        assert (int(best["k"]), float(best["alpha"])) == (res.selected.k, res.selected.alpha)
        assert [r["selected"] for r in rows].count("1") == 1 and best["selected"] == "1"


class TestDiagnostics:
    def test_shapes(self, tmp_path):
        lm = cycle_lm()
        rec = decode_lookback(lm, cycle_prefixes(1)[0], 5, 0.5, "softmax", DecodeConfig(max_new_tokens=20))
        paths = export_diagnostics(rec, tmp_path / "d", normalize=True)
        heat = list(csv.reader(open(paths["heatmap"])))
        assert heat[0] == ["step", *map(str, range(20))] and len(heat) == 21
        curves = read_csv(paths["curves"])
        assert len(curves) == 20 and "kl_min_history_norm" in curves[0]
        alarms = read_csv(paths["alarms"])
        assert len(alarms) == sum(s.alarm for s in rec.steps)

    def test_cycle_bands(self, tmp_path):
        lm = cycle_lm()
        rec = decode_greedy(lm, cycle_prefixes(1)[0], DecodeConfig(max_new_tokens=30))
        paths = export_diagnostics(rec, tmp_path)
        heat = np.array([[float(x) for x in row[1:]] for row in list(csv.reader(open(paths["heatmap"])))[1:]])
        # after warm-up the greedy path repeats with period 6
        assert all(heat[i, i - 6] < 1e-9 for i in range(12, 30))
        assert heat[20, 21] > 1.0

    def test_from_jsonl_needs_lm(self, tmp_path):
        lm = cycle_lm()
        rec = decode_greedy(lm, cycle_prefixes(1)[0], DecodeConfig(max_new_tokens=5))
        back = GenerationRecord.from_dict(json.loads(rec.to_json()))
        with pytest.raises(ValueError):
            export_diagnostics(back, tmp_path)
        paths = export_diagnostics(back, tmp_path, lm=lm)
        assert paths["heatmap"].read_text() == export_diagnostics(rec, tmp_path / "x")["heatmap"].read_text()


class TestCli:
    def test_train_and_decode(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text("a b c a b c a b c\n" * 5, encoding="utf-8")
        model = tmp_path / "m.json"
        assert main(["train-lm", "--corpus", str(corpus), "--out", str(model), "--order", "2"]) == 0
        out = tmp_path / "g.jsonl"
        assert main(["decode", "--model", str(model), "--prefix", "a b", "--decoder", "lookback",
                     "--max-new-tokens", "8", "--out", str(out)]) == 0
        rec = json.loads(out.read_text())
        assert rec["config"]["algorithm"] == "lookback" and len(rec["continuation"]) <= 8

    def test_evaluate_and_sweep(self, tmp_path, capsys):
        cfg = write_experiment(tmp_path)
        assert main(["evaluate", "--config", str(cfg)]) == 0
        assert capsys.readouterr().out.startswith(",".join(METRIC_COLUMNS))
        assert main(["sweep", "--config", str(cfg)]) == 0
        assert "selected: lookback(" in capsys.readouterr().out

    def test_evaluate_generations(self, tmp_path, capsys):
        lm = cycle_lm()
        model = tmp_path / "m.json"
        save_model(lm, model)
        gens = tmp_path / "g.jsonl"
        with gens.open("w") as fh:
            for p in cycle_prefixes(6):
                fh.write(decode_greedy(lm, p, DecodeConfig(max_new_tokens=16)).to_json() + "\n")
        refs = tmp_path / "refs.txt"
        refs.write_text("\n".join(["a b c d e f"] * 3 + ["w1 w2 w3 w4"] * 3))
        assert main(["evaluate", "--generations", str(gens), "--model", str(model), "--references", str(refs)]) == 0
        header, values = capsys.readouterr().out.strip().splitlines()
        assert header == "rep-2,rep-3,rep-4,diversity,coherence,mauve"

    def test_diagnose(self, tmp_path, capsys):
        lm = cycle_lm()
        model = tmp_path / "m.json"
        save_model(lm, model)
        assert main(["diagnose", "--model", str(model), "--prefix", "a b c d", "--max-new-tokens", "12",
                     "--decoder", "lookback", "--out", str(tmp_path / "diag"), "--normalize"]) == 0
        assert (tmp_path / "diag" / "heatmap.csv").exists()

    def test_missing_args(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["decode", "--prefix", "a"])
