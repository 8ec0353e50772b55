"""Seeded experiment orchestration: cross-validation, runs and persistence.

A run directory holds ``config.json``, ``result_matrix.csv``,
``metrics.json``, ``timing.json`` and ``memory_snapshot/``. Summaries are
always recomputed from those files.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import trainer
from .data import build_split_stream, generate_synthetic_dataset
from .memory import EpisodicMemory
from .metrics import ResultMatrix, acc_metric, bwt_metric
from .models import DivergenceError, model_for_stream, save_checkpoint
from .trainer import PATCH_METHODS, MethodConfig

logger = logging.getLogger(__name__)

DEFAULTS = {
    "dataset": "synthetic",
    "data_dir": None,
    "n_tasks": 5,
    "classes_per_task": 2,
    "n_cv": 1,
    "per_class_train": 250,
    "per_class_test": 100,
    "width": 32,
    "data_seed": 0,
    "glyph_style": {"background_max": 0.6, "brightness_jitter": 0.5, "rotate": True},
    "arch": "small-cnn",
    "init": "kaiming",
    "target_layer": None,
    "device": "cpu",
    "methods": ["epr", "er-ring", "finetune"],
    "seeds": [0, 1, 2],
    "lr": 0.1,
    "n_sc": 1.0,
    "epf": {"1.0": 2, "0.5": 1},
    "stride": 1,
    "batch_size": 10,
    "staging_per_class": None,
    "informativeness_epochs": 0,
    "lr_grid": [0.003, 0.01, 0.03, 0.1, 0.3, 1.0],
    "stride_grid": [1, 2, 3],
    "save_checkpoint": False,
    "out": "runs",
}


def resolve_config(path=None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the JSON file, then non-None overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        loaded = json.loads(Path(path).read_text())
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _listify(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def lr_for(cfg: dict, method: str) -> float:
    lr = cfg["lr"]
    return float(lr.get(method, lr.get("default", 0.1))) if isinstance(lr, dict) else float(lr)


def epf_for(cfg: dict, n_sc) -> int:
    epf = cfg["epf"]
    if isinstance(epf, dict):
        for key, value in epf.items():
            if float(key) == float(n_sc):
                return int(value)
        raise ValueError(f"no EPF configured for n_sc={n_sc}")
    return int(epf)


def run_tag(method: str, n_sc=None, epf=None) -> str:
    if method in PATCH_METHODS:
        return f"{method}_nsc{float(n_sc):g}_epf{epf}"
    if method in ("er-ring", "er-reservoir"):
        return f"{method}_nsc{float(n_sc):g}"
    return method


def stream_from_config(cfg: dict, seed: int, dataset=None):
    return build_split_stream(
        cfg["dataset"],
        cfg["n_tasks"],
        cfg["classes_per_task"],
        seed,
        n_cv=cfg["n_cv"],
        data_dir=cfg["data_dir"],
        dataset=dataset,
        per_class_train=cfg["per_class_train"],
        per_class_test=cfg["per_class_test"],
        width=cfg["width"],
        data_seed=cfg["data_seed"],
        style=cfg["glyph_style"],
    )


def shared_dataset(cfg: dict):
    if cfg["dataset"] != "synthetic":
        return None
    return generate_synthetic_dataset(cfg["n_tasks"] * cfg["classes_per_task"], cfg["per_class_train"],
                                      cfg["per_class_test"], cfg["width"], cfg["data_seed"], cfg["glyph_style"])


# --------------------------------------------------------------------------
# persistence


def export_memory_snapshot(memory, out_dir) -> Path:
    """One PNG per stored patch plus a manifest; full-image buffers get counts only."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": type(memory).__name__ if memory is not None else None, "entries": []}
    if isinstance(memory, EpisodicMemory):
        for i, patch in enumerate(memory.patches):
            name = f"patch_{i:04d}_t{patch.task_id}_c{patch.label}.png"
            pixels = np.clip(np.round(patch.pixels * 255), 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(out / name)
            manifest["entries"].append({
                "path": name,
                "task": int(patch.task_id),
                "class": int(patch.label),
                "x_cord": int(patch.x_cord),
                "y_cord": int(patch.y_cord),
                "W_p": int(patch.width),
                "tier": patch.tier,
                "source_box": None if patch.source_box is None else [int(v) for v in patch.source_box],
            })
    if memory is not None:
        manifest["counts"] = memory.snapshot()
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


@dataclass
class RunRecord:
    config: dict
    acc: Optional[float]
    bwt: Optional[float]
    per_task: list
    timing_total: float
    run_dir: Optional[str] = None
    status: str = "ok"
    fingerprints: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {
            "acc": self.acc,
            "bwt": self.bwt,
            "per_task": self.per_task,
            "timing_total": self.timing_total,
            "status": self.status,
            "fingerprints": self.fingerprints,
            **self.extra,
        }


def write_run(run_dir, config: dict, matrix: np.ndarray, timing: list, record: RunRecord, memory=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    ResultMatrix(matrix).to_csv(run_dir / "result_matrix.csv")
    (run_dir / "timing.json").write_text(json.dumps({"per_task": timing, "total": float(sum(timing))}, indent=1))
    (run_dir / "metrics.json").write_text(json.dumps(record.metrics(), indent=1))
    export_memory_snapshot(memory, run_dir / "memory_snapshot")
    record.run_dir = str(run_dir)


# --------------------------------------------------------------------------
# single runs


def _build(cfg: dict, stream, seed: int, tasks):
    model = model_for_stream(cfg["arch"], stream, seed, tasks, cfg["target_layer"], cfg["init"])
    return model.to(cfg["device"])


def run_method(cfg: dict, method: str, seed: int, stream, n_sc=None, run_dir=None) -> RunRecord:
    """Train one method on a stream's evaluation tasks and persist the run."""
    n_sc = cfg["n_sc"] if n_sc is None else n_sc
    n_sc = _listify(n_sc)[0]
    epf = epf_for(cfg, n_sc) if method in PATCH_METHODS else None
    mcfg = MethodConfig(method, lr_for(cfg, method), n_sc, epf or 1, cfg["stride"], cfg["batch_size"], seed,
                        cfg["staging_per_class"])
    tasks = stream.eval_tasks
    model = _build(cfg, stream, seed, tasks)
    run_config = {**cfg, **mcfg.to_dict(), "method": method, "seed": seed, "n_sc": float(n_sc), "epf": epf,
                  "class_order": list(stream.class_order)}
    run_config.pop("methods", None)
    run_config.pop("seeds", None)
    fingerprints = trainer.stream_fingerprints(seed)

    memory = None
    if method == "multitask":
        start = time.perf_counter()
        trainer.train_multitask(tasks, model, mcfg.lr, seed, mcfg.batch_size)
        timing = [time.perf_counter() - start]
        matrix = trainer.evaluate_all(model, tasks)[None, :]
        record = RunRecord(run_config, acc_metric(matrix), None, matrix[-1].tolist(), sum(timing),
                           fingerprints=fingerprints)
    else:
        try:
            result = trainer.train_continual(tasks, model, mcfg)
            status = "ok"
        except trainer.TrainingDiverged as exc:
            logger.warning("%s seed %d diverged: %s", method, seed, exc)
            result, status = exc.partial, "diverged"
        matrix, timing, memory = result.result_matrix, result.timing, result.memory
        if status == "ok":
            record = RunRecord(run_config, acc_metric(matrix), bwt_metric(matrix) if len(tasks) > 1 else None,
                               matrix[-1].tolist(), float(sum(timing)), fingerprints=fingerprints)
        else:
            record = RunRecord(run_config, None, None, [], float(sum(timing)), status=status,
                               fingerprints=fingerprints)
        epochs = cfg["informativeness_epochs"]
        if status == "ok" and epochs and memory is not None and len(memory):
            fresh = _build(cfg, stream, seed + 10_000, tasks)
            record.extra["informativeness"] = trainer.buffer_informativeness(memory, fresh, tasks, epochs,
                                                                             mcfg.lr, seed)
    if run_dir is not None:
        write_run(run_dir, run_config, matrix, timing, record, memory)
        if cfg["save_checkpoint"]:
            save_checkpoint(model, Path(run_dir) / "model.pt")
    return record


def run_experiment(cfg: dict, out=None) -> dict:
    """All methods x seeds (x n_sc values) into ``out``; writes summary.md/.csv."""
    from .report import emit_report

    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    dataset = shared_dataset(cfg)
    run_dirs = []
    for seed in _listify(cfg["seeds"]):
        stream = stream_from_config(cfg, seed, dataset)
        for method in _listify(cfg["methods"]):
            sizes = _listify(cfg["n_sc"]) if method in PATCH_METHODS + ("er-ring", "er-reservoir") else [None]
            for n_sc in sizes:
                epf = epf_for(cfg, n_sc) if method in PATCH_METHODS else None
                run_dir = out / run_tag(method, n_sc, epf) / f"seed_{seed}"
                try:
                    run_method(cfg, method, seed, stream, n_sc, run_dir)
                except Exception as exc:  # recorded per seed; summary marks the gap
                    logger.error("run %s failed: %s", run_dir, exc)
                    run_dir.mkdir(parents=True, exist_ok=True)
                    (run_dir / "metrics.json").write_text(json.dumps({"status": "failed", "error": str(exc)}))
                run_dirs.append(run_dir)
    (out / "summary.md").write_text(emit_report(run_dirs, "md"))
    (out / "summary.csv").write_text(emit_report(run_dirs, "csv"))
    return {"run_dirs": run_dirs, "summary": out / "summary.md"}


# --------------------------------------------------------------------------
# cross-validation


def cross_validate(grid: list, cv_tasks: list, model_factory: Callable) -> tuple:
    """Best config by ACC on the cross-validation tasks.

    Divergent configs score 0. Ties go to the lowest lr, then to the
    earliest config in ``grid``. Returns ``(best, scores)``.
    """
    if not grid:
        raise ValueError("empty grid")
    scores = []
    for mcfg in grid:
        model = model_factory(cv_tasks, mcfg.seed)
        try:
            if mcfg.method == "multitask":
                score = trainer.train_multitask(cv_tasks, model, mcfg.lr, mcfg.seed, mcfg.batch_size)
            else:
                score = acc_metric(trainer.train_continual(cv_tasks, model, mcfg).result_matrix)
        except DivergenceError:
            score = 0.0
        if not np.isfinite(score):
            score = 0.0
        scores.append(score)
    best = min(range(len(grid)), key=lambda i: (-scores[i], grid[i].lr, i))
    return grid[best], scores


def method_grid(cfg: dict, method: str, seed: int) -> list:
    strides = _listify(cfg["stride_grid"]) if method in PATCH_METHODS else [cfg["stride"]]
    n_sc = _listify(cfg["n_sc"])[0]
    epf = epf_for(cfg, n_sc) if method in PATCH_METHODS else 1
    return [MethodConfig(method, float(lr), n_sc, epf, int(s), cfg["batch_size"], seed, cfg["staging_per_class"])
            for lr, s in itertools.product(_listify(cfg["lr_grid"]), strides)]


def default_model_factory(cfg: dict, stream) -> Callable:
    def factory(tasks, seed):
        return _build(cfg, stream, seed, tasks)

    return factory


def run_cross_validation(cfg: dict, out=None) -> dict:
    """Grid search per method on the first ``n_cv`` tasks of the first seed's stream."""
    if cfg["n_cv"] < 1:
        raise ValueError("cross-validation needs n_cv >= 1")
    seed = _listify(cfg["seeds"])[0]
    stream = stream_from_config(cfg, seed, shared_dataset(cfg))
    factory = default_model_factory(cfg, stream)
    report = {}
    for method in _listify(cfg["methods"]):
        grid = method_grid(cfg, method, seed)
        best, scores = cross_validate(grid, stream.cv_tasks, factory)
        report[method] = {
            "best": best.to_dict(),
            "grid": [{"lr": g.lr, "stride": g.stride, "acc": s} for g, s in zip(grid, scores)],
        }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cv.json").write_text(json.dumps(report, indent=1))
    return report
