"""Joint training over all candidate bit-widths with in-place distillation.

Each step visits the candidates from the largest down. The largest bit-width's
logits become (detached) soft targets for every smaller one; per-bit losses
are summed and a single backward pass feeds two optimizers: SGD with momentum
for network weights, Adam for the quantizer clip bounds.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import Adam, NonFiniteError, SGDMomentum, Tensor, matmul_precision, no_grad, ops
from .topology import (
    ArchSpec,
    MultiQuantModel,
    SwitchableModel,
    build_branch_plan,
    build_selection_map,
)

logger = logging.getLogger(__name__)

METHODS = ("multiquant", "any-precision", "adabit")
SCHEDULES = ("step", "cosine")
HISTORY_HEADER = ["epoch", "step", "bit", "loss_ce", "loss_kd", "eval_acc"]


@dataclass
class TrainConfig:
    method: str = "multiquant"
    bits: tuple[int, ...] = (2, 4, 8)
    strategy: str = "amortized"
    distill: bool = True
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    quant_lr: float = 1e-4
    quant_weight_decay: float = 0.0
    schedule: str = "step"
    seed: int = 0
    selection: Optional[dict] = None  # explicit map when strategy == "explicit"
    matmul_dtype: str = "float64"

    def __post_init__(self):
        self.bits = tuple(sorted({int(b) for b in self.bits}))

    def problems(self) -> list[str]:
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.bits:
            out.append("bits must be nonempty")
        elif min(self.bits) < 2:
            out.append(f"every bit candidate must be >= 2, got {list(self.bits)}")
        if self.strategy not in ("serial", "amortized", "explicit"):
            out.append(f"unknown strategy {self.strategy!r}")
        if self.strategy == "explicit" and not self.selection:
            out.append("strategy 'explicit' needs a selection map")
        if self.schedule not in SCHEDULES:
            out.append(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.batch_size < 2:
            out.append("batch size must be >= 2 (batch statistics need two samples)")
        if self.matmul_dtype not in ("float32", "float64"):
            out.append(f"matmul_dtype must be float32 or float64, got {self.matmul_dtype!r}")
        for key in ("lr", "momentum", "weight_decay", "quant_lr", "quant_weight_decay"):
            if getattr(self, key) < 0:
                out.append(f"{key} must be >= 0")
        return out

    def validate(self) -> "TrainConfig":
        errs = self.problems()
        if errs:
            raise ValueError("invalid training config: " + "; ".join(errs))
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["bits"] = list(self.bits)
        return d


class TrainingAborted(RuntimeError):
    """Raised when a step produces a nonfinite loss; the model holds the last good state."""

    def __init__(self, msg: str, epoch: int, step: int):
        super().__init__(msg)
        self.epoch, self.step = epoch, step


@dataclass
class LossBundle:
    losses: dict  # bit -> Tensor (CE + KD)
    ce: dict  # bit -> float
    kd: dict  # bit -> float (absent for the teacher)
    total: Tensor
    teacher_logits: np.ndarray
    order: list = field(default_factory=list)


def build_for(cfg: TrainConfig, arch: ArchSpec = ArchSpec()):
    """Model for ``cfg``: the multi-branch model or a single-body baseline."""
    cfg.validate()
    plan = build_branch_plan(cfg.bits)
    if cfg.method == "multiquant":
        explicit = {int(k): v for k, v in cfg.selection.items()} if cfg.selection else None
        return MultiQuantModel(arch, plan, build_selection_map(plan, cfg.strategy, explicit), cfg.seed)
    return SwitchableModel(arch, plan, cfg.method, cfg.seed)


def loss_bundle(model, images, labels, candidates: Sequence[int], distill: bool = True) -> LossBundle:
    """Per-bit losses, visiting candidates from the largest (the teacher) down to the smallest."""
    order = sorted(set(candidates), reverse=True)
    if not order:
        raise ValueError("candidate set is empty")
    x = images if isinstance(images, Tensor) else Tensor(images)
    # the stem is bit-independent: one pass, its gradient accumulates over every bit-width
    h = model.stem_forward(x)
    losses, ce, kd = {}, {}, {}
    teacher = None
    total = None
    for b in order:
        model.set_bitwidth(b)
        logits = model.forward_from_stem(h)
        loss = ops.softmax_cross_entropy(logits, labels)
        ce[b] = float(loss.data)
        if teacher is None:
            # a fresh leaf: no path back into the network
            teacher = Tensor(logits.data.copy())
        elif distill:
            term = ops.soft_cross_entropy(logits, teacher)
            kd[b] = float(term.data)
            loss = ops.add(loss, term)
        losses[b] = loss
        total = loss if total is None else ops.add(total, loss)
    return LossBundle(losses, ce, kd, total, teacher.data, order)


def make_optimizers(model, cfg: TrainConfig) -> tuple[SGDMomentum, Adam]:
    weights, quant = model.weight_params(), model.quant_params()
    if {id(p) for p in weights} & {id(p) for p in quant}:
        raise RuntimeError("a parameter is claimed by both optimizers")
    if len(weights) + len(quant) != len(model.parameters()):
        raise RuntimeError("some trainable parameter belongs to neither optimizer")
    return (
        SGDMomentum(weights, cfg.lr, cfg.momentum, cfg.weight_decay),
        Adam(quant, cfg.quant_lr, weight_decay=cfg.quant_weight_decay),
    )


def train_step(model, images, labels, cfg: TrainConfig, optimizers) -> dict:
    """One joint step: loss bundle over every candidate, one backward, split update.

    Parameters not reached by any forward in the step (e.g. a BN bank of a
    branch that no visited bit-width selects) are left exactly as they were.
    """
    if not model.training:
        raise RuntimeError("train_step needs the model in training mode")
    sgd, adam = optimizers
    model.zero_grad()
    distill = cfg.distill and cfg.method == "multiquant"
    bundle = loss_bundle(model, images, labels, cfg.bits, distill)
    total = float(bundle.total.data)
    if not math.isfinite(total):
        raise NonFiniteError(f"nonfinite total loss {total} (per-bit CE {bundle.ce})")
    bundle.total.backward()
    active = set()
    for b in cfg.bits:
        active.update(id(p) for p in model.parameters_for(b))
    sgd.step(active)
    adam.step(active)
    model.project_quantizers()
    return {"loss": total, "ce": bundle.ce, "kd": bundle.kd}


def baseline_any_precision(model: SwitchableModel, images, labels, cfg: TrainConfig, optimizers) -> dict:
    """Summed CE over candidates on one shared body; weights are kept (and stored) full precision."""
    if model.method != "any-precision":
        raise ValueError("model was not built as an any-precision baseline")
    return train_step(model, images, labels, cfg, optimizers)


def baseline_adabit(model: SwitchableModel, images, labels, cfg: TrainConfig, optimizers) -> dict:
    """As any-precision but weights round to floor."""
    if model.method != "adabit":
        raise ValueError("model was not built as an adabit baseline")
    return train_step(model, images, labels, cfg, optimizers)


def lr_factor(schedule: str, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    if epoch >= 0.75 * epochs:
        return 0.01
    if epoch >= 0.5 * epochs:
        return 0.1
    return 1.0


def evaluate(model, images, labels, bits: int, batch_size: int = 500) -> float:
    """Top-1 accuracy at ``bits`` with running BN statistics; leaves the model as it found it."""
    was_training, was_bits = model.training, model.active_bits
    model.set_bitwidth(bits)
    model.eval()
    correct = 0
    try:
        with no_grad():
            for i in range(0, len(labels), batch_size):
                logits = model(Tensor(images[i : i + batch_size])).data
                correct += int(np.sum(np.argmax(logits, axis=1) == labels[i : i + batch_size]))
    finally:
        model.train(was_training)
        model.set_bitwidth(was_bits)
    return correct / len(labels)


@dataclass
class TrainResult:
    model: object
    history: list  # rows matching HISTORY_HEADER
    steps: int

    def final_accuracy(self) -> dict:
        last = max((r[0] for r in self.history), default=None)
        return {r[2]: r[5] for r in self.history if r[0] == last and r[5] != ""}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i : i + batch_size]
        if len(idx) >= 2:
            yield idx


def train(
    model,
    train_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    eval_set: Optional[tuple[np.ndarray, np.ndarray]] = None,
    on_epoch: Optional[Callable[[int, list], None]] = None,
) -> TrainResult:
    """Runs ``cfg.epochs`` epochs; one history row per (epoch, bit).

    On a nonfinite loss the model is rolled back to the state at the start of
    the failing epoch and :class:`TrainingAborted` is raised.
    """
    cfg.validate()
    with matmul_precision(cfg.matmul_dtype):
        return _train(model, train_set, cfg, eval_set, on_epoch)


def _train(model, train_set, cfg: TrainConfig, eval_set, on_epoch) -> TrainResult:
    images, labels = train_set
    rng = np.random.default_rng(cfg.seed)
    optimizers = make_optimizers(model, cfg)
    history: list = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        factor = lr_factor(cfg.schedule, epoch, cfg.epochs)
        optimizers[0].lr = cfg.lr * factor
        optimizers[1].lr = cfg.quant_lr * factor
        last_good = model.state_dict()
        sums = {b: [0.0, 0.0, 0] for b in cfg.bits}
        for idx in _batches(len(labels), cfg.batch_size, rng):
            try:
                metrics = train_step(model, images[idx], labels[idx], cfg, optimizers)
            except NonFiniteError as err:
                model.load_state_dict(last_good)
                logger.error("epoch %d step %d: %s; rolled back to last good state", epoch, step, err)
                raise TrainingAborted(str(err), epoch, step) from err
            step += 1
            for b in cfg.bits:
                sums[b][0] += metrics["ce"][b]
                sums[b][1] += metrics["kd"].get(b, 0.0)
                sums[b][2] += 1
        rows = []
        for b in sorted(cfg.bits):
            n = max(sums[b][2], 1)
            acc = evaluate(model, *eval_set, b) if eval_set is not None else ""
            rows.append([epoch, step, b, sums[b][0] / n, sums[b][1] / n, acc])
        history.extend(rows)
        logger.info("epoch %d: %s", epoch, {r[2]: r[5] for r in rows})
        if on_epoch is not None:
            on_epoch(epoch, rows)
    return TrainResult(model, history, step)


def write_history(history: list, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_history(path: Path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HISTORY_HEADER:
            raise ValueError(f"{path}: unexpected history header {header}")
        rows = []
        for r in reader:
            acc = float(r[5]) if r[5] else ""
            rows.append([int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), acc])
    return rows
