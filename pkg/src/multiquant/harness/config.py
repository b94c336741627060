"""File-backed run configuration: one flat JSON object with kebab-case keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..topology import ArchSpec
from ..trainer import TrainConfig

DATASETS = ("mnist-idx", "synthetic")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid run config:\n  - " + "\n  - ".join(self.problems))


@dataclass
class RunConfig:
    # training (mirrors TrainConfig); lr and matmul dtype are desk-scale defaults
    method: str = "multiquant"
    bits: list = field(default_factory=lambda: [2, 4, 8])
    strategy: str = "amortized"
    selection: Optional[dict] = None
    distill: bool = True
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    quant_lr: float = 1e-4
    quant_weight_decay: float = 0.0
    schedule: str = "step"
    seed: int = 0
    matmul_dtype: str = "float32"
    # data
    dataset: str = "mnist-idx"
    data_dir: Optional[str] = None
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    normalize: bool = True
    synthetic_classes: int = 10
    synthetic_dim: int = 64
    synthetic_n: int = 1000
    # architecture
    stem_channels: int = 16
    body: list = field(default_factory=lambda: [[32, True], [32, False]])
    # outputs
    out: Optional[str] = None
    msqe_report: bool = False
    msqe_u: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    msqe_samples: int = 1_000_000

    @staticmethod
    def key(name: str) -> str:
        return name.replace("_", "-")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {cls.key(f.name): f.name for f in fields(cls)}
        unknown = sorted(k for k in d if k not in known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        return cls(**{known[k]: v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {self.key(k): v for k, v in asdict(self).items()}

    def with_overrides(self, **kw: Any) -> "RunConfig":
        d = asdict(self)
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method, bits=tuple(self.bits), strategy=self.strategy, distill=self.distill,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, quant_lr=self.quant_lr, quant_weight_decay=self.quant_weight_decay,
            schedule=self.schedule, seed=self.seed, selection=self.selection, matmul_dtype=self.matmul_dtype,
        )

    def arch(self) -> ArchSpec:
        if self.dataset == "synthetic":
            side = int(round(self.synthetic_dim**0.5))
            return ArchSpec(1, side, self.stem_channels, True, tuple(map(tuple, self.body)), self.synthetic_classes)
        return ArchSpec(1, 28, self.stem_channels, True, tuple(map(tuple, self.body)), 10)

    def problems(self, need_data: bool = True, need_out: bool = True) -> list[str]:
        """Every validation failure at once (nothing touches the filesystem)."""
        out = []
        try:
            out += self.train_config().problems()
        except (TypeError, ValueError) as err:
            out.append(f"training fields: {err}")
        if self.dataset not in DATASETS:
            out.append(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "mnist-idx" and need_data:
            if not self.data_dir:
                out.append("dataset 'mnist-idx' needs data-dir")
            elif not Path(self.data_dir).is_dir():
                out.append(f"data-dir {self.data_dir!r} does not exist")
        if self.dataset == "synthetic":
            side = int(round(self.synthetic_dim**0.5))
            if side * side != self.synthetic_dim:
                out.append("synthetic-dim must be a perfect square (samples are shaped as images)")
            if self.synthetic_classes < 2:
                out.append("synthetic-classes must be >= 2")
        for name in ("subset", "test_subset"):
            v = getattr(self, name)
            if v is not None and v < 1:
                out.append(f"{self.key(name)} must be positive")
        try:
            self.arch()
        except (TypeError, ValueError) as err:
            out.append(f"architecture: {err}")
        if self.msqe_report and (not self.msqe_u or min(self.msqe_u) <= 0):
            out.append("msqe-u must list positive clip bounds")
        if need_out and not self.out:
            out.append("out (output directory) is required")
        return out

    def validate(self, need_data: bool = True, need_out: bool = True) -> "RunConfig":
        errs = self.problems(need_data, need_out)
        if errs:
            raise ConfigError(errs)
        return self


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} not found"]) from None
    except json.JSONDecodeError as err:
        raise ConfigError([f"config file {path} is not valid JSON: {err}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    return RunConfig.from_dict(raw)
