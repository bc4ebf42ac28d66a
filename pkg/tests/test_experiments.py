import csv
import json
import math
import os
import types

import numpy as np
import pytest

from curvkan import cli
from curvkan.errors import ConfigError
from curvkan.experiments import (
    ExperimentConfig, Preset, RunRecord, best_lambda, feynman_table, green_window, load_preset, lower_median,
    read_runs_csv, report, run_single, run_sweep, summarize, write_activations,
)
from curvkan.network import init_network

TINY = {"train": {"epochs": 4, "warmup_epochs": 2, "batch_size": 32}, "n_train": 64, "n_test": 32}


def tiny(**kw):
    d = {"name": "t", "target": "sin_x_plus_y2", "widths": [2, 2, 1], "grid_size": 5,
         "lams": [1e-3], "seeds": [0], "penalty": {"kind": "curvature"}, **TINY}
    d.update(kw)
    return d


def record(label, target, lam, seed, rmse, curv=1.0, aborted=False):
    return RunRecord("x", label, target, [2, 2, 1], 5, "bspline", label, lam, seed, "adam", rmse, rmse,
                     None, curv, [], 0.0, aborted)


class TestConfig:
    def test_defaults_and_widths(self):
        cfg = load_preset(tiny(widths=None)).conditions[0]
        assert cfg.widths == [2, 2, 1]
        assert cfg.label == "curvature"

    @pytest.mark.parametrize("bad", [dict(widths=[3, 2, 1]), dict(target="nope"), dict(lams=[]), dict(seeds=[]),
                                     dict(penalty={"kind": "ridge"}), dict(basis="wavelet"), dict(colour=1),
                                     dict(lams=[-1.0]), dict(train={"optimizer": "sgd"})])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            load_preset(tiny(**bad))

    def test_preset_merging(self):
        p = load_preset({"name": "p", "base": tiny(train={"epochs": 4, "warmup_epochs": 2, "batch_size": 16}),
                         "conditions": [{"label": "a", "train": {"epochs": 6}}, {"label": "b", "penalty": {"kind": "kan"}}]})
        a, b = p.conditions
        assert a.train.epochs == 6 and a.train.batch_size == 16
        assert b.penalty.kind.value == "kan"

    @pytest.mark.parametrize("name", cli.PRESETS)
    def test_bundled_presets_load(self, name):
        p = load_preset(cli.resolve_config(name))
        assert p.conditions and p.name == name

    def test_invalid_json(self):
        with pytest.raises(ConfigError):
            load_preset("{not json")


class TestAggregation:
    def test_lower_median(self):
        assert lower_median([3, 1, 2]) == 2
        assert lower_median([4, 1, 3, 2]) == 2
        assert math.isnan(lower_median([]))

    def test_best_lambda_and_window(self):
        recs = [record("c", "t", lam, s, r) for lam, rs in [(0.1, [3, 4, 5]), (1.0, [1, 2, 9]), (10.0, [8, 8, 8])]
                for s, r in enumerate(rs)]
        from curvkan.experiments import summarize_condition
        rows = summarize_condition(recs)
        assert [r["median_test_rmse"] for r in rows] == [4, 2, 8]
        assert best_lambda(rows) == 1.0
        win = green_window(rows, baseline_rmse=2.0, baseline_curvature=2.0)
        assert [w["lam"] for w in win] == [0.1, 1.0]

    def test_aborted_cells_tolerated(self):
        from curvkan.experiments import summarize_condition
        rows = summarize_condition([record("c", "t", 1.0, 0, math.inf, aborted=True), record("c", "t", 1.0, 1, 2.0)])
        assert rows[0]["n_aborted"] == 1 and rows[0]["median_test_rmse"] == 2.0

    def test_geometric_mean_lambda_star(self):
        # per-target medians chosen so the arithmetic and geometric rules disagree
        A, B = "I.18.4", "I.16.6"
        table = {1e-4: {A: 1e-3, B: 10.0}, 1e-3: {A: 1.0, B: 1.0}}
        recs = [record("curv", t, lam, 0, v) for lam, per in table.items() for t, v in per.items()]
        recs += [record("kan", t, 1e-4, 0, 0.5) for t in (A, B)]
        preset = Preset("f", "feynman", [_cfg("curv"), _cfg("kan")], targets=[A, B])
        out = feynman_table(preset, recs)
        assert out["lambda_star"] == {"curv": 1e-4, "kan": 1e-4}
        rowA, rowB = out["rows"]
        assert rowA["curv_rmse_winner"] and not rowA["kan_rmse_winner"]
        assert rowB["kan_rmse_winner"] and not rowB["curv_rmse_within_2x"]


def _cfg(label):
    return types.SimpleNamespace(label=label)


class TestRunning:
    def test_sweep_of_one_equals_single(self):
        cfg = load_preset(tiny()).conditions[0]
        a = run_single(cfg)
        (b,) = run_sweep(cfg)
        for k in ("train_rmse", "test_rmse", "r2", "total_curvature", "per_edge_curvature", "lam", "seed"):
            assert getattr(a, k) == getattr(b, k)

    def test_scout_then_fill(self):
        cfg = load_preset(tiny(lams=[1e-4, 1e-1], seeds=[0, 1, 2], selection="scout")).conditions[0]
        recs = run_sweep(cfg)
        assert [(r.lam, r.seed) for r in recs[:2]] == [(1e-4, 0), (1e-1, 0)]
        best = min(recs[:2], key=lambda r: r.test_rmse).lam
        assert [(r.lam, r.seed) for r in recs[2:]] == [(best, 1), (best, 2)]

    def test_parallel_matches_serial(self):
        cfg = load_preset(tiny(lams=[1e-4, 1e-2])).conditions[0]
        a = run_sweep(cfg, jobs=1)
        b = run_sweep(cfg, jobs=2)
        assert [r.test_rmse for r in a] == [r.test_rmse for r in b]


class TestReport:
    def _records(self):
        cfg = load_preset(tiny(lams=[1e-4, 1e-2])).conditions[0]
        return run_sweep(cfg)

    def test_files_and_roundtrip(self, tmp_path):
        recs = self._records()
        report(recs, tmp_path)
        assert (tmp_path / "summary.json").exists()
        assert len(list((tmp_path / "curves").iterdir())) == 2
        assert len(list((tmp_path / "activations").iterdir())) == 2
        back = read_runs_csv(tmp_path / "runs.csv")
        assert back == recs

    def test_empty_trajectory(self, tmp_path):
        rec = record("c", "sin_x_plus_y2", 0.1, 0, 0.5)
        report([rec], tmp_path)
        assert not (tmp_path / "curves").exists()
        assert json.loads((tmp_path / "summary.json").read_text())["n_records"] == 1

    def test_summary_deterministic(self, tmp_path):
        p = load_preset(tiny(lams=[1e-4, 1e-2]))
        for d in ("a", "b"):
            recs = run_sweep(p.conditions[0])
            report(recs, tmp_path / d, summarize(p, recs))
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()

    def test_affine_activation_file(self, tmp_path):
        net = init_network([1, 1], 6, input_domain=[(-1, 1)])
        net.layers[0].w_b[:] = 0
        net.layers[0].coeffs[:] = np.arange(9) * 0.1
        write_activations(net, tmp_path / "a.csv")
        with open(tmp_path / "a.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 256
        assert max(abs(float(r["d2phi"])) for r in rows) < 1e-10

    def test_needs_records(self, tmp_path):
        with pytest.raises(ConfigError):
            report([], tmp_path)


class TestCli:
    def _write(self, tmp_path, **kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(tiny(**kw)))
        return str(path)

    def test_train_and_bound_check(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CURVKAN_OUTPUT_ROOT", str(tmp_path / "out"))
        cfg = self._write(tmp_path)
        assert cli.main(["train", cfg]) == 0
        run_dir = tmp_path / "out" / "t"
        assert (run_dir / "runs.csv").exists()
        ckpt = next((run_dir / "checkpoints").iterdir())
        out = tmp_path / "bound.json"
        assert cli.main(["bound-check", str(ckpt), cfg, "--output", str(out)]) == 0
        assert "ratio" in json.loads(out.read_text())
        assert cli.main(["report", str(run_dir), "--config", cfg]) == 0

    def test_sweep(self, tmp_path):
        cfg = self._write(tmp_path, lams=[1e-4, 1e-3])
        assert cli.main(["sweep", cfg, "--output", str(tmp_path / "s")]) == 0
        summary = json.loads((tmp_path / "s" / "summary.json").read_text())
        assert summary["conditions"]["curvature"]["best_lambda"] in (1e-4, 1e-3)

    def test_feynman(self, tmp_path):
        preset = {"name": "fy", "mode": "feynman", "targets": ["I.18.4", "I.16.6"],
                  "base": {**TINY, "grid_size": 5, "seeds": [0]},
                  "conditions": [{"label": "kan", "penalty": {"kind": "kan"}, "lams": [1e-4]},
                                 {"label": "curvature", "penalty": {"kind": "curvature"}, "lams": [1e-4]}]}
        path = tmp_path / "f.json"
        path.write_text(json.dumps(preset))
        assert cli.main(["feynman", str(path), "--output", str(tmp_path / "f")]) == 0
        table = json.loads((tmp_path / "f" / "summary.json").read_text())
        assert [r["equation"] for r in table["rows"]] == ["I.18.4", "I.16.6"]
        assert all(r["kan_curvature_winner"] or r["curvature_curvature_winner"] for r in table["rows"])

    def test_config_error_exit(self, tmp_path, capsys):
        assert cli.main(["train", self._write(tmp_path, widths=[3, 1])]) == 1
        assert cli.main(["train", str(tmp_path / "missing.json")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_numerical_abort_exit(self, tmp_path):
        cfg = self._write(tmp_path, train={"epochs": 4, "warmup_epochs": 0, "batch_size": 32,
                                           "learning_rate": 1e6, "divergence_threshold": 10.0})
        assert cli.main(["train", cfg, "--output", str(tmp_path / "o")]) == 2
        rec = read_runs_csv(tmp_path / "o" / "runs.csv")[0]
        assert rec.aborted
