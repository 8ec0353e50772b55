import json

import numpy as np
import pytest

from epr import cli
from epr.experiment import (cross_validate, default_model_factory, resolve_config, run_cross_validation,
                            run_experiment, run_tag, stream_from_config)
from epr.metrics import ResultMatrix, acc_metric, bwt_metric
from epr.report import (emit_plots, emit_report, find_run_dirs, memory_sweep_series, parse_csv_report,
                        summarize)
from epr.trainer import MethodConfig

TINY = {"n_tasks": 3, "n_cv": 1, "per_class_train": 12, "per_class_test": 6, "width": 16,
        "lr_grid": [0.01, 0.1], "stride_grid": [1]}


def tiny_cfg(**kw):
    return resolve_config(None, {**TINY, **kw})


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = tiny_cfg(methods=["epr", "finetune"], seeds=[0, 1, 2], informativeness_epochs=1)
    return out, run_experiment(cfg, out)


class TestConfig:
    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"lr": 0.5, "seeds": [4]}))
        cfg = resolve_config(path, {"lr": 0.2, "stride": None})
        assert cfg["lr"] == 0.2 and cfg["seeds"] == [4] and cfg["stride"] == 1

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"learning_rate": 0.5}))
        with pytest.raises(ValueError):
            resolve_config(path)

    def test_tags(self):
        assert run_tag("epr", 0.5, 1) == "epr_nsc0.5_epf1"
        assert run_tag("er-ring", 1.0) == "er-ring_nsc1"
        assert run_tag("finetune") == "finetune"


class TestRunExperiment:
    def test_layout(self, experiment_dir):
        out, result = experiment_dir
        assert len(result["run_dirs"]) == 6
        for d in result["run_dirs"]:
            for name in ("config.json", "result_matrix.csv", "metrics.json", "timing.json"):
                assert (d / name).exists()
            assert (d / "memory_snapshot" / "manifest.json").exists()
        assert (out / "summary.md").exists() and (out / "summary.csv").exists()

    def test_summary_recomputes(self, experiment_dir):
        out, result = experiment_dir
        rows = {r["method"]: r for r in parse_csv_report((out / "summary.csv").read_text())}
        for method in ("epr", "finetune"):
            accs, bwts = [], []
            for d in result["run_dirs"]:
                config = json.loads((d / "config.json").read_text())
                if config["method"] != method:
                    continue
                r = ResultMatrix.from_csv(d / "result_matrix.csv").values
                metrics = json.loads((d / "metrics.json").read_text())
                assert metrics["acc"] == pytest.approx(acc_metric(r), abs=1e-12)
                accs.append(acc_metric(r))
                bwts.append(bwt_metric(r))
            assert rows[method]["acc_mean"] == pytest.approx(np.mean(accs), abs=1e-12)
            assert rows[method]["acc_std"] == pytest.approx(np.std(accs), abs=1e-12)
            assert rows[method]["bwt_mean"] == pytest.approx(np.mean(bwts), abs=1e-12)

    def test_fingerprints_unique_per_seed(self, experiment_dir):
        _, result = experiment_dir
        prints = {}
        for d in result["run_dirs"]:
            m = json.loads((d / "metrics.json").read_text())
            c = json.loads((d / "config.json").read_text())
            prints.setdefault(c["seed"], set()).add(json.dumps(m["fingerprints"], sort_keys=True))
        assert all(len(v) == 1 for v in prints.values())
        assert len({next(iter(v)) for v in prints.values()}) == 3

    def test_memory_manifest(self, experiment_dir):
        _, result = experiment_dir
        d = next(d for d in result["run_dirs"] if "epr" in str(d))
        manifest = json.loads((d / "memory_snapshot" / "manifest.json").read_text())
        assert len(manifest["entries"]) == 2 * 2 * 2
        e = manifest["entries"][0]
        assert set(e) >= {"task", "class", "x_cord", "y_cord", "W_p", "tier"} and e["W_p"] == 11
        assert (d / "memory_snapshot" / e["path"]).exists()

    def test_rerun_is_identical(self, experiment_dir, tmp_path):
        out, result = experiment_dir
        again = run_experiment(tiny_cfg(methods=["epr"], seeds=[1], informativeness_epochs=1), tmp_path)
        first = out / "epr_nsc1_epf2" / "seed_1" / "result_matrix.csv"
        assert (again["run_dirs"][0] / "result_matrix.csv").read_bytes() == first.read_bytes()

    def test_failure_marks_gap(self, tmp_path):
        cfg = tiny_cfg(methods=["finetune"], seeds=[0], lr=1e6)
        result = run_experiment(cfg, tmp_path)
        assert "0/1 (gaps)" in (tmp_path / "summary.md").read_text()
        assert json.loads((result["run_dirs"][0] / "metrics.json").read_text())["status"] == "diverged"


class TestCrossValidate:
    def _setup(self):
        cfg = tiny_cfg()
        stream = stream_from_config(cfg, 0)
        return stream.cv_tasks, default_model_factory(cfg, stream)

    def test_single_config(self):
        cv, factory = self._setup()
        grid = [MethodConfig("finetune", 0.1)]
        best, scores = cross_validate(grid, cv, factory)
        assert best is grid[0] and len(scores) == 1

    def test_divergent_never_selected(self):
        cv, factory = self._setup()
        grid = [MethodConfig("finetune", 1e6), MethodConfig("finetune", 0.01)]
        best, scores = cross_validate(grid, cv, factory)
        assert scores[0] == 0.0 and best is grid[1]

    def test_tie_goes_to_lowest_lr(self):
        cv, factory = self._setup()
        # lr values too small to move predictions give identical scores
        grid = [MethodConfig("finetune", 1e-12), MethodConfig("finetune", 1e-13), MethodConfig("finetune", 1e-12)]
        best, scores = cross_validate(grid, cv, factory)
        assert len(set(scores)) == 1 and best is grid[1]

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            cross_validate([], [], None)

    def test_reproducible(self, tmp_path):
        cfg = tiny_cfg(methods=["finetune"], lr_grid=[0.01, 0.1, 1.0])
        a = run_cross_validation(cfg, tmp_path)
        b = run_cross_validation(cfg)
        assert a == b
        assert (tmp_path / "cv.json").exists()


class TestReport:
    def test_empty(self):
        with pytest.raises(ValueError):
            emit_report([], "md")

    def test_md_columns(self, experiment_dir):
        _, result = experiment_dir
        text = emit_report(result["run_dirs"], "md")
        assert text.splitlines()[0] == "| n_sc | Method | ACC (%) | BWT | Runs |"
        assert "±" in text

    def test_csv_round_trip(self, experiment_dir):
        _, result = experiment_dir
        rows = summarize(result["run_dirs"])
        parsed = parse_csv_report(emit_report(result["run_dirs"], "csv"))
        for a, b in zip(rows, parsed):
            for k in ("acc_mean", "acc_std", "bwt_mean", "bwt_std"):
                assert a[k] == b[k]

    def test_deterministic(self, experiment_dir):
        _, result = experiment_dir
        assert emit_report(result["run_dirs"], "csv") == emit_report(result["run_dirs"], "csv")

    def test_plots(self, experiment_dir, tmp_path):
        _, result = experiment_dir
        paths = emit_plots(result["run_dirs"], tmp_path)
        names = {p.name for p in paths}
        assert {"acc_vs_memory.png", "timing.png", "informativeness.png"} <= names
        assert all(p.stat().st_size > 0 for p in paths)


def test_memory_sweep_series():
    rows = []
    for method in ("epr", "er-ring"):
        for n_sc in (0.5, 0.75, 1.0, 2.0):
            rows.append({"method": method, "n_sc": n_sc, "epf": 1, "acc_mean": n_sc / 2, "acc_std": 0.0})
    rows.append({"method": "finetune", "n_sc": None, "epf": None, "acc_mean": 0.1, "acc_std": 0.0})
    series = memory_sweep_series(rows)
    assert set(series) == {"epr", "er-ring"}
    assert [p[0] for p in series["epr"]] == [0.5, 0.75, 1.0, 2.0]


class TestCLI:
    def test_run_report_plot_inspect(self, tmp_path, capsys):
        out = tmp_path / "runs"
        argv = ["run", "--method", "epr,er-ring", "--seeds", "0", "--n-sc", "1,0.5", "--epf", "1:2,0.5:1",
                "--n-tasks", "3", "--per-class-train", "12", "--out", str(out)]
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"width": 16, "per_class_test": 6}))
        assert cli.main(argv + ["--config", str(cfg_path)]) == 0
        text = capsys.readouterr().out
        assert "| 0.5 | epr (EPF 1) |" in text and "figure:" in text

        assert cli.main(["report", str(out), "--format", "csv"]) == 0
        rows = parse_csv_report(capsys.readouterr().out)
        assert len(rows) == 4

        assert cli.main(["plot", str(out), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "acc_vs_memory.png").exists()

        run_dir = next(d for d in find_run_dirs(out) if d.parent.name == "epr_nsc1_epf2")
        capsys.readouterr()
        assert cli.main(["inspect-memory", str(run_dir)]) == 0
        printed = capsys.readouterr().out
        assert "task,class,x_cord,y_cord,W_p,tier" in printed
        assert (run_dir / "memory_snapshot" / "grid.png").exists()

    def test_cv_verb(self, tmp_path, capsys):
        argv = ["cv", "--method", "finetune", "--n-tasks", "3", "--per-class-train", "12", "--out", str(tmp_path)]
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"width": 16, "per_class_test": 6, "lr_grid": [0.01, 0.1]}))
        assert cli.main(argv + ["--config", str(cfg_path)]) == 0
        assert capsys.readouterr().out.startswith("finetune: lr=")

    def test_report_missing(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["report", str(tmp_path)])
