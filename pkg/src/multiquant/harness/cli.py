"""``multiquant`` command line.

Verbs: train, eval, ablate, msqe, report, audit, prepare-mnist. Flags override
keys of the ``--config`` JSON file. Every verb validates its inputs before it
writes anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..error_analysis import msqe_table, write_msqe_csv
from ..topology import storage_report
from ..trainer import build_for
from .config import ConfigError, RunConfig, load_run_config
from .data import DatasetError, prepare_mnist
from .experiment import (
    ReportError,
    _cost_rows,
    evaluate_run,
    render_ablation,
    report,
    run_ablation,
    run_experiment,
    summarize_ablation,
    write_cost_csv,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (kebab-case keys)")
    p.add_argument("--bits", type=_int_list, help="candidate bit-widths, e.g. 2,4,6,8")
    p.add_argument("--strategy", choices=["amortized", "serial", "explicit"])
    p.add_argument("--method", choices=["multiquant", "any-precision", "adabit"])
    p.add_argument("--distill", type=_on_off, metavar="on|off")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one configuration and write its artifacts")
    _run_flags(p)

    p = sub.add_parser("eval", help="re-evaluate a finished run from its checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data-dir", help="override the dataset location")

    p = sub.add_parser("ablate", help="strategy x distillation grid over several seeds")
    _run_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])

    p = sub.add_parser("msqe", help="analytic vs Monte-Carlo quantization error table")
    p.add_argument("--bits", type=_int_list, default=[2, 4, 6, 8])
    p.add_argument("--u", type=_float_list, default=[1.0, 2.0, 3.0])
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--denominator", choices=["pow2", "exact-bin"], default="pow2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for msqe.csv")

    p = sub.add_parser("report", help="summarize run directories (or an ablation root)")
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--out", help="run directory or ablation root")
    p.add_argument("--csv", help="also write the summary as CSV here")

    p = sub.add_parser("audit", help="compute-cost parity and storage breakdown")
    _run_flags(p)

    p = sub.add_parser("prepare-mnist", help="write the bundled 5k MNIST sample as IDX files")
    p.add_argument("--out", required=True, help="data directory to create")
    p.add_argument("--source", help="CSV(.gz) of 784 pixels + label per row")
    p.add_argument("--test", type=int, default=1000, help="test-split size (stratified)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        bits=args.bits, strategy=args.strategy, method=args.method, distill=args.distill,
        seed=args.seed, epochs=args.epochs, data_dir=args.data_dir, out=args.out,
    )


def _workers() -> int:
    raw = os.environ.get("MQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"MQ_THREADS must be a positive integer, got {raw!r}"]) from None
    if n < 1:
        raise ConfigError([f"MQ_THREADS must be a positive integer, got {raw!r}"])
    return n


def cmd_train(args) -> int:
    cfg = _run_config(args).validate()
    result = run_experiment(cfg)
    print((result.out / "table.txt").read_text(), end="")
    return EXIT_ABORTED if result.status else EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.out)
    if not (run / "model.ckpt").exists():
        raise ReportError(f"{run}: no checkpoint")
    data = None
    if args.data_dir:
        from .experiment import load_dataset

        meta = json.loads((run / "metadata.json").read_text())
        cfg = RunConfig.from_dict(meta["config"]).with_overrides(data_dir=args.data_dir)
        data = load_dataset(cfg.validate(need_out=False))
    acc = evaluate_run(run, data)
    for b in sorted(acc, reverse=True):
        print(f"{b}\t{100 * acc[b]:.2f}")
    print(f"Avg.\t{100 * sum(acc.values()) / len(acc):.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    cfg.validate()
    summary = run_ablation(cfg, args.seeds, _workers())
    print(render_ablation(summary), end="")
    return EXIT_OK


def cmd_msqe(args) -> int:
    problems = []
    if not args.bits or min(args.bits) < 2:
        problems.append("bits must be >= 2")
    if not args.u or min(args.u) <= 0:
        problems.append("clip bounds must be positive")
    if args.samples < 10_000:
        problems.append("samples must be >= 1e4")
    if problems:
        raise ConfigError(problems)
    rows = msqe_table(args.bits, args.u, denominator=args.denominator, n_samples=args.samples, seed=args.seed)
    print("b\tu\tvariant\tanalytic\tmonte_carlo\trel_gap")
    for r in rows:
        print(f"{r.bits}\t{r.u:g}\t{r.variant}\t{r.total_analytic:.6g}\t{r.total_monte_carlo:.6g}\t{r.relative_gap:.4f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_msqe_csv(rows, Path(args.out) / "msqe.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    dirs = list(args.runs) or ([args.out] if args.out else [])
    if not dirs:
        raise ReportError("give run directories or --out")
    if len(dirs) == 1 and (Path(dirs[0]) / "amortized-distill-on").is_dir():
        print(render_ablation(summarize_ablation(dirs[0])), end="")
        return EXIT_OK
    print(report(dirs, Path(args.csv) if args.csv else None), end="")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _run_config(args).validate(need_data=False, need_out=False)
    model = build_for(cfg.train_config(), cfg.arch())
    rows = _cost_rows(model)
    if rows:
        print("bit\tmultiquant\treference\tparity")
        for r in rows:
            print(f"{r.bits}\t{r.multiquant:.0f}\t{r.reference:.0f}\t{r.parity}")
    storage = storage_report(model)
    for k, v in storage.as_dict().items():
        print(f"{k}: {v}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_cost_csv(rows, out / "cost.csv")
        (out / "storage.json").write_text(json.dumps(storage.as_dict(), indent=2))
    return EXIT_OK


def cmd_prepare(args) -> int:
    info = prepare_mnist(args.out, args.source, args.test, args.seed)
    print(json.dumps(info))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "msqe": cmd_msqe,
    "report": cmd_report,
    "audit": cmd_audit,
    "prepare-mnist": cmd_prepare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ReportError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
