"""Layer containers on top of the op set."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    yield f"{key}.{k}", v
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad and value.is_leaf:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_arrays(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Every piece of numeric state: parameter data and buffers."""
        for key, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + key, value.data
            elif isinstance(value, np.ndarray):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_arrays(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_arrays())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, arr in own.items():
            if arr.shape != np.shape(state[k]):
                raise ValueError(f"{k}: shape {np.shape(state[k])} != {arr.shape}")
            arr[...] = state[k]


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 1,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = Tensor(kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in), requires_grad=True, kind="weight")
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, kind="weight") if bias else None

    def macs(self, h: int, w: int) -> int:
        oh = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        return oh * ow * self.out_channels * self.in_channels * self.kernel_size**2

    def forward(self, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        return ops.conv2d(x, self.weight if weight is None else weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True, kind="weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, kind="weight") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.weight = Tensor(np.ones(channels), requires_grad=True, kind="weight")
        self.bias = Tensor(np.zeros(channels), requires_grad=True, kind="weight")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )
