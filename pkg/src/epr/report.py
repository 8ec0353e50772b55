"""Summary tables and figures, recomputed from persisted run directories."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .metrics import ResultMatrix, acc_metric, bwt_metric
from .plotting import MARKERS, color_for, get_fig_ax, save_fig

CSV_FIELDS = ("method", "n_sc", "epf", "acc_mean", "acc_std", "bwt_mean", "bwt_std", "n_ok", "n_runs")


def load_run(run_dir) -> dict:
    """Config and metrics of one run; ACC/BWT are recomputed from the CSV."""
    run_dir = Path(run_dir)
    metrics = json.loads((run_dir / "metrics.json").read_text()) if (run_dir / "metrics.json").exists() else {}
    config = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    record = {
        "dir": str(run_dir),
        "config": config,
        "method": config.get("method", run_dir.parent.name),
        "n_sc": config.get("n_sc"),
        "epf": config.get("epf"),
        "seed": config.get("seed"),
        "status": metrics.get("status", "missing"),
        "acc": None,
        "bwt": None,
        "informativeness": metrics.get("informativeness"),
        "timing": None,
    }
    if record["status"] == "ok":
        matrix = ResultMatrix.from_csv(run_dir / "result_matrix.csv").values
        record["acc"] = acc_metric(matrix)
        if matrix.shape[0] > 1:
            record["bwt"] = bwt_metric(matrix)
    if (run_dir / "timing.json").exists():
        record["timing"] = json.loads((run_dir / "timing.json").read_text())["total"]
    return record


def _group_key(rec: dict) -> tuple:
    return rec["method"], rec["n_sc"] if rec["method"] not in ("finetune", "multitask") else None, rec["epf"]


def _mean_std(values: list) -> tuple:
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def summarize(run_dirs) -> list:
    """One row per (method, n_sc, EPF) with mean and population std over seeds."""
    run_dirs = list(run_dirs)
    if not run_dirs:
        raise ValueError("no run directories given")
    groups: OrderedDict = OrderedDict()
    for d in run_dirs:
        rec = load_run(d)
        groups.setdefault(_group_key(rec), []).append(rec)
    rows = []
    for (method, n_sc, epf), recs in groups.items():
        ok = [r for r in recs if r["status"] == "ok"]
        acc_mean, acc_std = _mean_std([r["acc"] for r in ok])
        bwt_mean, bwt_std = _mean_std([r["bwt"] for r in ok])
        rows.append({
            "method": method, "n_sc": n_sc, "epf": epf,
            "acc_mean": acc_mean, "acc_std": acc_std, "bwt_mean": bwt_mean, "bwt_std": bwt_std,
            "n_ok": len(ok), "n_runs": len(recs),
        })
    return rows


def _fmt(mean, std, scale=1.0, digits=1) -> str:
    if mean is None:
        return "-"
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


def emit_report(run_dirs, fmt: str = "md") -> str:
    """Table with ``n_sc | Method | ACC (%) | BWT`` columns (md) or raw numbers (csv)."""
    rows = summarize(run_dirs)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in CSV_FIELDS})
        return buf.getvalue()
    if fmt != "md":
        raise ValueError(f"unknown format {fmt!r}")
    lines = ["| n_sc | Method | ACC (%) | BWT | Runs |", "|---|---|---|---|---|"]
    for row in rows:
        n_sc = "-" if row["n_sc"] is None else f"{row['n_sc']:g}"
        name = row["method"] if row["epf"] is None else f"{row['method']} (EPF {row['epf']})"
        runs = f"{row['n_ok']}/{row['n_runs']}"
        if row["n_ok"] < row["n_runs"]:
            runs += " (gaps)"
        lines.append(f"| {n_sc} | {name} | {_fmt(row['acc_mean'], row['acc_std'], 100)} | "
                     f"{_fmt(row['bwt_mean'], row['bwt_std'], 1, 2)} | {runs} |")
    return "\n".join(lines) + "\n"


def parse_csv_report(text: str) -> list:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if k == "method":
                parsed[k] = v
            elif v == "":
                parsed[k] = None
            elif k in ("epf", "n_ok", "n_runs"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        rows.append(parsed)
    return rows


# --------------------------------------------------------------------------
# figure series


def memory_sweep_series(rows: list) -> dict:
    """``{method: [(n_sc, acc_mean, acc_std), ...]}`` sorted by n_sc.

    Patch methods with several EPF values at one n_sc keep the best mean.
    """
    series: dict = {}
    for row in rows:
        if row["n_sc"] is None or row["acc_mean"] is None:
            continue
        points = series.setdefault(row["method"], {})
        prev = points.get(row["n_sc"])
        if prev is None or row["acc_mean"] > prev[1]:
            points[row["n_sc"]] = (row["n_sc"], row["acc_mean"], row["acc_std"])
    return {m: [pts[k] for k in sorted(pts)] for m, pts in series.items()}


def epf_series(rows: list) -> dict:
    """``{n_sc: [(epf, acc_mean, acc_std), ...]}`` for EPR runs."""
    series: dict = {}
    for row in rows:
        if row["method"] == "epr" and row["epf"] is not None and row["acc_mean"] is not None:
            series.setdefault(row["n_sc"], []).append((row["epf"], row["acc_mean"], row["acc_std"]))
    return {k: sorted(v) for k, v in sorted(series.items())}


def bar_series(run_dirs, field: str) -> list:
    """``[(label, mean, std), ...]`` of a per-run scalar (``informativeness`` or ``timing``)."""
    groups: OrderedDict = OrderedDict()
    for d in run_dirs:
        rec = load_run(d)
        if rec["status"] != "ok" or rec[field] is None:
            continue
        method, n_sc, epf = _group_key(rec)
        label = method if n_sc is None else f"{method}\nn_sc={n_sc:g}"
        groups.setdefault(label, []).append(rec[field])
    return [(label, *_mean_std(vals)) for label, vals in groups.items()]


def _bars(points, ylabel, path):
    fig, ax = get_fig_ax(max(4.5, 0.9 * len(points)))
    labels = [p[0] for p in points]
    colors = [color_for(label.split("\n")[0]) for label in labels]
    ax.bar(range(len(points)), [p[1] for p in points], yerr=[p[2] for p in points], color=colors, capsize=3)
    ax.set_xticks(range(len(points)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(ylabel)
    return save_fig(fig, path)


def emit_plots(run_dirs, out_dir) -> list:
    """Render the available figures into ``out_dir``; returns the written paths."""
    run_dirs = list(run_dirs)
    rows = summarize(run_dirs)
    out_dir = Path(out_dir)
    written = []

    sweep = memory_sweep_series(rows)
    if sweep:
        fig, ax = get_fig_ax()
        for method, pts in sweep.items():
            xs, ys, es = zip(*pts)
            ax.errorbar(xs, [100 * y for y in ys], yerr=[100 * e for e in es], label=method,
                        color=color_for(method), marker=MARKERS.get(method, "o"), capsize=3)
        ax.set_xlabel("memory size per class (n_sc)")
        ax.set_ylabel("ACC (%)")
        ax.legend()
        written.append(save_fig(fig, out_dir / "acc_vs_memory.png"))

    by_epf = epf_series(rows)
    if any(len(v) > 1 for v in by_epf.values()):
        fig, ax = get_fig_ax()
        for n_sc, pts in by_epf.items():
            xs, ys, es = zip(*pts)
            ax.errorbar(xs, [100 * y for y in ys], yerr=[100 * e for e in es], marker="o", capsize=3,
                        label=f"n_sc={n_sc:g}")
        ax.set_xlabel("examples per class (EPF)")
        ax.set_ylabel("ACC (%)")
        ax.legend()
        written.append(save_fig(fig, out_dir / "acc_vs_epf.png"))

    info = bar_series(run_dirs, "informativeness")
    if info:
        info = [(label, 100 * m, 100 * s) for label, m, s in info]
        written.append(_bars(info, "joint-training ACC on buffer (%)", out_dir / "informativeness.png"))

    timing = bar_series(run_dirs, "timing")
    if timing:
        written.append(_bars(timing, "training time (s)", out_dir / "timing.png"))
    return written


def find_run_dirs(root) -> list:
    """Run directories (those holding metrics.json) below ``root``, sorted."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob("metrics.json"))


def isclose_rows(a: list, b: list, tol: float = 1e-12) -> bool:
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        for k in CSV_FIELDS:
            va, vb = ra[k], rb[k]
            if isinstance(va, float) and isinstance(vb, float):
                if not math.isclose(va, vb, rel_tol=0, abs_tol=tol):
                    return False
            elif va != vb:
                return False
    return True
