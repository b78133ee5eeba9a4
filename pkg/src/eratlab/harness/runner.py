"""Run experiments from an ExperimentConfig and write their artifacts.

Each run directory holds ``metrics.csv`` (one row per epoch), ``summary.json``
(final metrics plus the config echo) and ``model.ckpt``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from ..corrupt import NEEDS_VICTIM, corrupt_labels, fit_victim, flip_audit, poison_data
from ..datagen import Dataset, load_dataset, make_blobs, make_grid_images, train_test_split
from ..model import save_checkpoint
from ..trainer import EpochReport, train, train_ce
from .config import ExperimentConfig, parse_config, dump_config

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    method: str
    final_accuracy: float
    reports: list[EpochReport]
    wall_time: float
    config: dict
    corruption: dict

    def __post_init__(self):
        if not 0.0 <= self.final_accuracy <= 100.0:
            raise ValueError(f"accuracy out of range: {self.final_accuracy}")

    @property
    def precision_curve(self) -> list[float | None]:
        return [r.selection["precision"] if r.selection else None for r in self.reports]

    @property
    def recall_curve(self) -> list[float | None]:
        return [r.selection["recall"] if r.selection else None for r in self.reports]

    def summary(self) -> dict:
        accs = [r.test_acc for r in self.reports if r.test_acc is not None]
        return {
            "method": self.method,
            "final_accuracy": self.final_accuracy,
            "best_accuracy": max(accs) if accs else None,
            "epochs": len(self.reports),
            "final_precision": self.precision_curve[-1] if self.reports else None,
            "final_recall": self.recall_curve[-1] if self.reports else None,
            "wall_time": self.wall_time,
            "corruption": self.corruption,
            "config": self.config,
        }


# ---------------------------------------------------------------- data


def make_clean_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Clean (train, test) pair for the configured benchmark."""
    d = cfg.dataset
    if d.kind == "file":
        train_ds = load_dataset(d.train_path)
        if d.test_path is None:
            raise FileNotFoundError("dataset.test_path is required with dataset.kind = file")
        return train_ds, load_dataset(d.test_path)
    per_class = d.train_per_class + d.test_per_class
    if d.kind == "blobs":
        full = make_blobs(d.classes, per_class, d.dim, d.spread, cfg.data_seed)
    else:
        full = make_grid_images(d.classes, per_class, d.side, cfg.data_seed, noise=d.pixel_noise)
    return train_test_split(full, d.train_per_class)


def default_arch(cfg: ExperimentConfig, ds: Dataset) -> str:
    if cfg.train.arch:
        return cfg.train.arch
    if ds.image_shape is not None:
        return f"tinyconv side={ds.image_shape[0]} classes={ds.num_classes} channels=4,8 kernel=3"
    return f"mlp {ds.dim},64,64,{ds.num_classes}"


def corrupt(cfg: ExperimentConfig, clean: Dataset) -> tuple[Dataset, dict]:
    """Label noise first, then poisoning against the noisy labels; returns (dataset, audit)."""
    noisy = corrupt_labels(clean, cfg.noise_spec())
    audit = {"labels": flip_audit(clean, noisy)}
    spec = cfg.poison_spec()
    if spec.family == "none":
        return noisy, audit
    victim = None
    if spec.family in NEEDS_VICTIM:
        victim = fit_victim(noisy, default_arch(cfg, noisy), cfg.effective_victim_epochs, seed=cfg.victim_seed)
    poisoned, info = poison_data(noisy, spec, victim, return_info=True)
    info.pop("class_deltas", None)
    audit["poison"] = info
    return poisoned, audit


# ---------------------------------------------------------------- runs


def run(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    start = time.perf_counter()
    clean, test = make_clean_data(cfg)
    train_ds, audit = corrupt(cfg, clean)
    tcfg = replace(cfg.train_config(), arch=default_arch(cfg, train_ds))
    fit = train_ce if cfg.method == "ce" else train
    model, reports = fit(tcfg, train_ds, test)
    result = RunResult(cfg.method, reports[-1].test_acc, reports, time.perf_counter() - start, cfg.echo(), audit)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", reports, train_ds.num_classes)
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n", encoding="utf-8")
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        save_checkpoint(model, out / "model.ckpt")
    return result


def metrics_header(num_classes: int) -> list[str]:
    base = ["epoch", "L_l", "L_u", "L_s", "lambda", "test_acc", "selection_precision", "selection_recall"]
    return base + [f"labeled_{k}" for k in range(num_classes)]


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def metrics_rows(reports, num_classes: int) -> list[list[str]]:
    rows = []
    for r in reports:
        sel = r.selection or {}
        counts = sel.get("labeled_counts") or [""] * num_classes
        rows.append(
            [str(r.epoch)]
            + [_cell(v) for v in (r.loss_l, r.loss_u, r.loss_s, r.lam, r.test_acc, sel.get("precision"), sel.get("recall"))]
            + [str(c) for c in counts]
        )
    return rows


def write_metrics_csv(path, reports, num_classes: int) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(num_classes))
    writer.writerows(metrics_rows(reports, num_classes))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------- sweeps


def expand_grid(grid: dict[str, list[str]]) -> list[dict[str, str]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_point(args) -> dict:
    text, source, overrides = args
    cfg = parse_config(text, source, overrides)
    return run(cfg).summary()


def sweep(text: str, grid, source: str = "<config>", base_dir=None, workers: int = 1, overrides=()) -> list[dict]:
    """Run the cartesian product of ``grid`` over the base config text; returns run summaries in grid order."""
    overrides = list(overrides)
    base = parse_config(text, source, overrides)
    root = Path(base_dir or base.output_dir)
    points = expand_grid(grid)
    jobs = []
    for i, point in enumerate(points):
        tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())
        point_overrides = overrides + [f"{k}={v}" for k, v in point.items()] + [f"output.dir={root / f'run_{i:03d}_{tag}'}"]
        parse_config(text, source, point_overrides)  # fail fast on a bad grid value
        jobs.append((text, source, point_overrides))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_point, jobs))
    else:
        summaries = [_run_point(job) for job in jobs]
    root.mkdir(parents=True, exist_ok=True)
    index = [{"point": p, **{k: s[k] for k in ("method", "final_accuracy", "best_accuracy")}} for p, s in zip(points, summaries)]
    (root / "sweep.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return summaries


# ---------------------------------------------------------------- reports


def collect_summaries(root) -> list[tuple[Path, dict]]:
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"results directory not found: {root}")
    return [(p.parent, json.loads(p.read_text(encoding="utf-8"))) for p in sorted(root.rglob("summary.json"))]


def render_report(root) -> str:
    rows = collect_summaries(root)
    if not rows:
        return f"no summary.json files under {root}\n"
    header = f"{'run':40s} {'method':8s} {'final':>7s} {'best':>7s} {'prec':>6s}"
    lines = [header, "-" * len(header)]
    root = Path(root)
    for path, s in rows:
        name = str(path.relative_to(root)) if path != root else "."
        prec = s.get("final_precision")
        prec_txt = f"{prec:6.3f}" if prec is not None else f"{'-':>6s}"
        lines.append(f"{name:40s} {s['method']:8s} {s['final_accuracy']:7.2f} {s['best_accuracy']:7.2f} {prec_txt}")
    return "\n".join(lines) + "\n"
