"""Command line entry point: ``epr run|cv|report|plot|inspect-memory``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment, report
from .data import DATASETS


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v]


def _epf(text: str):
    """``2`` or ``1:2,0.5:1`` (n_sc -> EPF)."""
    if ":" not in text:
        return int(text)
    pairs = (item.split(":") for item in text.split(",") if item)
    return {str(float(k)): int(v) for k, v in pairs}


def _lr(text: str):
    """``0.1`` or ``epr=0.1,finetune=0.03``."""
    if "=" not in text:
        return float(text)
    return {k: float(v) for k, v in (item.split("=") for item in text.split(",") if item)}


def _seeds(text: str) -> list:
    return _ints(text)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config; flags override its values")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--method", dest="methods", type=lambda s: s.split(","), help="comma-separated methods")
    p.add_argument("--n-sc", dest="n_sc", type=_floats, help="comma-separated memory sizes per class")
    p.add_argument("--epf", type=_epf, help="EPF, or n_sc:EPF pairs")
    p.add_argument("--stride", type=int)
    p.add_argument("--lr", type=_lr, help="learning rate, or method=lr pairs")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--n-tasks", dest="n_tasks", type=int)
    p.add_argument("--classes-per-task", dest="classes_per_task", type=int)
    p.add_argument("--n-cv", dest="n_cv", type=int)
    p.add_argument("--per-class-train", dest="per_class_train", type=int)
    p.add_argument("--informativeness-epochs", dest="informativeness_epochs", type=int)
    p.add_argument("--device", help="torch device, e.g. cpu or cuda")
    p.add_argument("--out", help="output directory")


_OVERRIDES = ("dataset", "data_dir", "methods", "n_sc", "epf", "stride", "lr", "seeds", "batch_size", "n_tasks",
              "classes_per_task", "n_cv", "per_class_train", "informativeness_epochs", "device", "out")


def _resolve(args) -> dict:
    cfg = experiment.resolve_config(args.config, {k: getattr(args, k) for k in _OVERRIDES})
    if isinstance(cfg["n_sc"], list) and len(cfg["n_sc"]) == 1:
        cfg["n_sc"] = cfg["n_sc"][0]
    return cfg


def _run_dirs(paths) -> list:
    dirs = []
    for p in paths:
        p = Path(p)
        dirs.extend([p] if (p / "metrics.json").exists() else report.find_run_dirs(p))
    if not dirs:
        raise SystemExit(f"no run directories found under {', '.join(map(str, paths))}")
    return dirs


def cmd_run(args) -> int:
    cfg = _resolve(args)
    result = experiment.run_experiment(cfg)
    out = Path(cfg["out"])
    print(Path(result["summary"]).read_text(), end="")
    for path in report.emit_plots(result["run_dirs"], out / "plots"):
        print(f"figure: {path}")
    return 0


def cmd_cv(args) -> int:
    cfg = _resolve(args)
    result = experiment.run_cross_validation(cfg, cfg["out"])
    for method, entry in result.items():
        best = entry["best"]
        print(f"{method}: lr={best['lr']:g} stride={best['stride']}")
        for g in entry["grid"]:
            print(f"  lr={g['lr']:g} stride={g['stride']} acc={g['acc']:.4f}")
    return 0


def cmd_report(args) -> int:
    dirs = _run_dirs(args.paths)
    text = report.emit_report(dirs, args.format)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"summary.{args.format}").write_text(text)
        for path in report.emit_plots(dirs, out / "plots"):
            print(f"figure: {path}")
    return 0


def cmd_plot(args) -> int:
    dirs = _run_dirs(args.paths)
    out = Path(args.out or Path(args.paths[0]) / "plots")
    paths = report.emit_plots(dirs, out)
    if not paths:
        print("no plottable data", file=sys.stderr)
        return 1
    for path in paths:
        print(f"figure: {path}")
    return 0


def render_memory_grid(run_dir, out=None, columns: int = 8) -> Path:
    """Tile the stored patches of a run's memory snapshot into one image."""
    from PIL import Image

    from .plotting import get_fig_ax, save_fig

    snap = Path(run_dir) / "memory_snapshot"
    manifest = json.loads((snap / "manifest.json").read_text())
    entries = manifest["entries"]
    if not entries:
        raise ValueError(f"{snap} holds no patches ({manifest.get('kind')})")
    rows = -(-len(entries) // columns)
    fig, ax = get_fig_ax(1.2 * columns, 1.3 * rows)
    fig.delaxes(ax)
    for i, entry in enumerate(entries):
        sub = fig.add_subplot(rows, columns, i + 1)
        sub.imshow(Image.open(snap / entry["path"]))
        sub.set_title(f"c{entry['class']} {entry['tier'] or ''}\n({entry['x_cord']},{entry['y_cord']})", fontsize=6)
        sub.axis("off")
    return save_fig(fig, Path(out) if out else snap / "grid.png")


def cmd_inspect_memory(args) -> int:
    snap = Path(args.run_dir) / "memory_snapshot" / "manifest.json"
    if not snap.exists():
        raise SystemExit(f"{snap} not found")
    manifest = json.loads(snap.read_text())
    print(json.dumps({"kind": manifest.get("kind"), **manifest.get("counts", {})}, indent=1))
    if manifest["entries"]:
        print("task,class,x_cord,y_cord,W_p,tier")
        for e in manifest["entries"]:
            print(f"{e['task']},{e['class']},{e['x_cord']},{e['y_cord']},{e['W_p']},{e['tier']}")
        print(f"figure: {render_memory_grid(args.run_dir, args.out)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epr", description="Online continual learning with packed replay.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run methods x seeds and summarize")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cv", help="grid search on the cross-validation tasks")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("report", help="summary table from run directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.add_argument("--out", help="also write summary and figures here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="figures from run directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("inspect-memory", help="list and render a run's memory snapshot")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output PNG (default: memory_snapshot/grid.png)")
    p.set_defaults(func=cmd_inspect_memory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
