"""End-to-end runs, their on-disk artifacts, and reports built from those artifacts."""

from __future__ import annotations

import csv
import json
import logging
import platform
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..error_analysis import msqe_table, write_msqe_csv
from ..topology import (
    MultiQuantModel,
    compute_cost,
    load_checkpoint,
    save_checkpoint,
    storage_report,
)
from ..trainer import TrainingAborted, build_for, evaluate, read_history, train, write_history
from .config import ConfigError, RunConfig
from .data import DatasetHandle, load_mnist_dir, make_synthetic

logger = logging.getLogger(__name__)

METADATA = "metadata.json"
HISTORY = "history.csv"
ACCURACY = "accuracy.csv"
STORAGE = "storage.json"
COST = "cost.csv"
CHECKPOINT = "model.ckpt"
TABLE = "table.txt"
MSQE = "msqe.csv"


class ReportError(RuntimeError):
    pass


def load_dataset(cfg: RunConfig) -> DatasetHandle:
    if cfg.dataset == "synthetic":
        data = make_synthetic(cfg.synthetic_classes, cfg.synthetic_dim, cfg.synthetic_n, cfg.seed)
    else:
        data = load_mnist_dir(cfg.data_dir, cfg.subset, cfg.test_subset, seed=cfg.seed)
    return data.normalized() if cfg.normalize else data


@dataclass
class RunResult:
    status: int
    out: Path
    accuracy: dict
    history: list


def _cost_rows(model) -> list:
    if not isinstance(model, MultiQuantModel):
        return []
    macs = model.body_macs(1)
    half = model.body_macs("H") if "H" in model.branches else None
    return [compute_cost(model.plan, model.selection, b, macs, half) for b in model.plan.bit_candidates]


def write_cost_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bit", "multiquant_mac_bits", "reference_mac_bits", "parity"])
        for r in rows:
            w.writerow([r.bits, r.multiquant, r.reference, r.parity])


def run_experiment(cfg: RunConfig, data: Optional[DatasetHandle] = None) -> RunResult:
    """Train, evaluate every candidate bit-width and write all artifacts under ``cfg.out``.

    Validation (config and dataset) happens before the output directory is created.
    Returns status 0 on success, 3 if training aborted on a nonfinite loss.
    """
    cfg.validate()
    if data is None:
        data = load_dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    model = build_for(tcfg, cfg.arch())
    meta = {
        "config": cfg.to_dict(),
        "arch": model.arch.to_json(),
        "bits": list(model.plan.bit_candidates),
        "selection": model.selection.as_json() if isinstance(model, MultiQuantModel) else None,
        "usage": {str(k): v for k, v in model.selection.usage_counts().items()} if isinstance(model, MultiQuantModel) else None,
        "data": {"train": int(len(data.train_labels)), "test": int(len(data.test_labels)), "mean": data.mean, "std": data.std},
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    (out / METADATA).write_text(json.dumps(meta, indent=2))

    status = 0
    try:
        result = train(model, data.train, tcfg, data.test)
        history = result.history
    except TrainingAborted as err:
        logger.error("run aborted: %s", err)
        status, history = 3, []
    write_history(history, out / HISTORY)
    save_checkpoint(model, out / CHECKPOINT)

    accuracy = {b: evaluate(model, *data.test, b) for b in model.plan.bit_candidates}
    storage = storage_report(model)
    with open(out / ACCURACY, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bit", "accuracy"])
        for b in sorted(accuracy, reverse=True):
            w.writerow([b, repr(accuracy[b])])
    (out / STORAGE).write_text(json.dumps(storage.as_dict(), indent=2))
    write_cost_csv(_cost_rows(model), out / COST)
    if cfg.msqe_report:
        write_msqe_csv(msqe_table(cfg.bits, cfg.msqe_u, n_samples=cfg.msqe_samples, seed=cfg.seed), out / MSQE)
    (out / TABLE).write_text(render_table([load_run(out)]))
    return RunResult(status, out, accuracy, history)


def evaluate_run(run_dir, data: Optional[DatasetHandle] = None) -> dict:
    """Reload a run's checkpoint and re-evaluate every candidate bit-width."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / METADATA).read_text())
    cfg = RunConfig.from_dict(meta["config"])
    if data is None:
        data = load_dataset(cfg)
    model = load_checkpoint(run_dir / CHECKPOINT)
    return {b: evaluate(model, *data.test, b) for b in model.plan.bit_candidates}


# ---- reports: pure functions of stored artifacts ----


@dataclass
class RunSummary:
    label: str
    method: str
    strategy: str
    distill: bool
    seed: int
    accuracy: dict  # bit -> fraction
    size_mb: float
    usage: Optional[dict]

    @property
    def average(self) -> float:
        return sum(self.accuracy.values()) / len(self.accuracy)


def load_run(run_dir, label: Optional[str] = None) -> RunSummary:
    run_dir = Path(run_dir)
    for name in (METADATA, ACCURACY, STORAGE):
        if not (run_dir / name).exists():
            raise ReportError(f"{run_dir}: missing {name}")
    if not (run_dir / HISTORY).exists():
        raise ReportError(f"{run_dir}: missing history file {HISTORY}")
    read_history(run_dir / HISTORY)  # header check
    meta = json.loads((run_dir / METADATA).read_text())
    cfg = meta["config"]
    with open(run_dir / ACCURACY, newline="") as fh:
        rows = list(csv.DictReader(fh))
    accuracy = {int(r["bit"]): float(r["accuracy"]) for r in rows}
    storage = json.loads((run_dir / STORAGE).read_text())
    return RunSummary(
        label or run_dir.name, cfg["method"], cfg["strategy"], bool(cfg["distill"]), int(cfg["seed"]),
        accuracy, storage["total_bytes"] / 1e6, meta.get("usage"),
    )


def render_table(runs: Sequence[RunSummary]) -> str:
    """Per-bit top-1 (%), an ``Avg.`` row and a ``Size (MB)`` row; one column per run."""
    bits = sorted({b for r in runs for b in r.accuracy}, reverse=True)
    width = max(12, *(len(r.label) + 2 for r in runs))
    lines = ["Bit-Widths".ljust(12) + "".join(r.label.rjust(width) for r in runs)]
    for b in bits:
        cells = [f"{100 * r.accuracy[b]:.2f}" if b in r.accuracy else "-" for r in runs]
        lines.append(str(b).ljust(12) + "".join(c.rjust(width) for c in cells))
    lines.append("Avg.".ljust(12) + "".join(f"{100 * r.average:.2f}".rjust(width) for r in runs))
    lines.append("Size (MB)".ljust(12) + "".join(f"{r.size_mb:.2f}".rjust(width) for r in runs))
    for r in runs:
        if r.usage:
            lines.append(f"branch usage [{r.label}, {r.strategy}]: " + ", ".join(f"{k}:{v}" for k, v in r.usage.items()))
    return "\n".join(lines) + "\n"


def write_summary_csv(runs: Sequence[RunSummary], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "method", "strategy", "distill", "seed", "bit", "accuracy"])
        for r in runs:
            for b in sorted(r.accuracy, reverse=True):
                w.writerow([r.label, r.method, r.strategy, r.distill, r.seed, b, r.accuracy[b]])
            w.writerow([r.label, r.method, r.strategy, r.distill, r.seed, "Avg.", r.average])
            w.writerow([r.label, r.method, r.strategy, r.distill, r.seed, "Size (MB)", round(r.size_mb, 2)])


def report(run_dirs: Sequence, out_csv: Optional[Path] = None) -> str:
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ReportError("no runs to report")
    if out_csv is not None:
        write_summary_csv(runs, out_csv)
    return render_table(runs)


# ---- ablation grid ----

ABLATION_GRID = [("amortized", True), ("serial", True), ("amortized", False), ("serial", False)]


def ablation_label(strategy: str, distill: bool) -> str:
    return f"{strategy}-distill-{'on' if distill else 'off'}"


def ablation_configs(base: RunConfig, seeds: Sequence[int]) -> list[RunConfig]:
    out = []
    for strategy, distill in ABLATION_GRID:
        for seed in seeds:
            run_out = str(Path(base.out) / ablation_label(strategy, distill) / f"seed-{seed}")
            out.append(base.with_overrides(method="multiquant", strategy=strategy, distill=distill, seed=seed, out=run_out))
    return out


@dataclass
class AblationSummary:
    mean_accuracy: dict  # label -> {bit: mean acc}
    seeds: dict  # label -> list of seeds
    lowest_bit: int

    def delta(self, label: str, reference: str = ablation_label("amortized", True)) -> dict:
        ref = self.mean_accuracy[reference]
        return {b: self.mean_accuracy[label][b] - ref[b] for b in ref}

    def direction(self) -> dict:
        """Lowest-bit mean accuracy comparisons (``True`` means the full method is at least as good)."""
        lo = self.lowest_bit
        acc = {k: v[lo] for k, v in self.mean_accuracy.items()}
        full = ablation_label("amortized", True)
        return {
            "amortized>=serial": acc[full] >= acc[ablation_label("serial", True)],
            "distill>=no-distill": acc[full] >= acc[ablation_label("amortized", False)],
        }


def summarize_ablation(root) -> AblationSummary:
    root = Path(root)
    mean, seeds = {}, {}
    for strategy, distill in ABLATION_GRID:
        label = ablation_label(strategy, distill)
        dirs = sorted((root / label).glob("seed-*"))
        if not dirs:
            raise ReportError(f"{root / label}: no runs")
        runs = [load_run(d) for d in dirs]
        bits = sorted(runs[0].accuracy)
        mean[label] = {b: statistics.fmean(r.accuracy[b] for r in runs) for b in bits}
        seeds[label] = [r.seed for r in runs]
    lowest = min(next(iter(mean.values())))
    return AblationSummary(mean, seeds, lowest)


def render_ablation(summary: AblationSummary) -> str:
    labels = [ablation_label(s, d) for s, d in ABLATION_GRID]
    bits = sorted(next(iter(summary.mean_accuracy.values())), reverse=True)
    width = max(len(l) for l in labels) + 2
    lines = ["mean top-1 (%) over seeds " + str(next(iter(summary.seeds.values())))]
    lines.append("Bit-Widths".ljust(12) + "".join(l.rjust(width) for l in labels))
    for b in bits:
        lines.append(str(b).ljust(12) + "".join(f"{100 * summary.mean_accuracy[l][b]:.2f}".rjust(width) for l in labels))
    lines.append("")
    lines.append("delta vs " + labels[0] + " (percentage points)")
    for b in bits:
        lines.append(str(b).ljust(12) + "".join(f"{100 * summary.delta(l)[b]:+.2f}".rjust(width) for l in labels))
    lines.append("")
    for k, v in summary.direction().items():
        lines.append(f"lowest bit ({summary.lowest_bit}) {k}: {'yes' if v else 'no'}")
    return "\n".join(lines) + "\n"


def write_ablation_csv(summary: AblationSummary, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "bit", "mean_accuracy", "delta_vs_full"])
        for label, acc in summary.mean_accuracy.items():
            d = summary.delta(label)
            for b in sorted(acc, reverse=True):
                w.writerow([label, b, acc[b], d[b]])


def _run_one(cfg: RunConfig) -> int:
    return run_experiment(cfg).status


def run_ablation(base: RunConfig, seeds: Sequence[int], workers: int = 1) -> AblationSummary:
    """The four strategy x distillation configurations, each over ``seeds``."""
    configs = ablation_configs(base, seeds)
    problems = sorted({p for c in configs for p in c.problems()})
    if problems:
        raise ConfigError(problems)
    load_dataset(base)  # fail before writing anything
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_run_one, configs))
    else:
        statuses = [_run_one(c) for c in configs]
    if any(statuses):
        logger.warning("some ablation runs aborted: %s", statuses)
    summary = summarize_ablation(base.out)
    (Path(base.out) / "ablation.txt").write_text(render_ablation(summary))
    write_ablation_csv(summary, Path(base.out) / "ablation.csv")
    return summary
