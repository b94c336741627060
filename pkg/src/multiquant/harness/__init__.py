from .config import ConfigError, RunConfig, load_run_config
from .data import DatasetError, DatasetHandle, load_mnist_dir, load_mnist_idx, make_synthetic, prepare_mnist, read_idx, write_idx
from .experiment import (
    ReportError,
    evaluate_run,
    load_run,
    render_table,
    report,
    run_ablation,
    run_experiment,
    summarize_ablation,
)

__all__ = [
    "ConfigError",
    "DatasetError",
    "DatasetHandle",
    "ReportError",
    "RunConfig",
    "evaluate_run",
    "load_mnist_dir",
    "load_mnist_idx",
    "load_run",
    "load_run_config",
    "make_synthetic",
    "prepare_mnist",
    "read_idx",
    "render_table",
    "report",
    "run_ablation",
    "run_experiment",
    "summarize_ablation",
    "write_idx",
]
