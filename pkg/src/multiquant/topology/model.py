"""Multi-branch 2-bit model and the single-body switchable baseline."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..engine import BatchNorm2d, Conv2d, Linear, Module, Tensor, ops
from ..quantizer import QuantizerParams, fake_quantize, init_clip_params, reinit_from
from .plan import HALF, BranchId, BranchPlan, SelectionMap, branch_sort_key

BRANCH_WEIGHT_BITS = 2


@dataclass(frozen=True)
class ArchSpec:
    """Stem conv -> body of 3x3 conv blocks -> linear head.

    ``body`` lists ``(out_channels, pool_after)`` per conv block.
    """

    in_channels: int = 1
    image_size: int = 28
    stem_channels: int = 16
    stem_pool: bool = True
    body: tuple[tuple[int, bool], ...] = ((32, True), (32, False))
    num_classes: int = 10

    def __post_init__(self):
        if not self.body:
            raise ValueError("body must contain at least one conv layer")
        object.__setattr__(self, "body", tuple((int(c), bool(p)) for c, p in self.body))
        size = self.image_size // 2 if self.stem_pool else self.image_size
        for _, pool in self.body:
            if pool:
                if size % 2:
                    raise ValueError(f"feature map of size {size} cannot be 2x2 pooled")
                size //= 2

    @property
    def body_channels(self) -> list[int]:
        return [c for c, _ in self.body]

    @property
    def feature_size(self) -> int:
        size = self.image_size // 2 if self.stem_pool else self.image_size
        for _, pool in self.body:
            size = size // 2 if pool else size
        return size

    def to_json(self) -> dict:
        d = asdict(self)
        d["body"] = [list(b) for b in self.body]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["body"] = tuple(tuple(b) for b in d["body"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def half_channels(channels: list[int]) -> list[int]:
    """Halve every internal width (floor, min 1); the last layer keeps its width for the head."""
    return [max(1, c // 2) for c in channels[:-1]] + [channels[-1]]


class QConvBlock(Module):
    """act-quant -> weight-quantized 3x3 conv -> switchable BN -> relu [-> 2x2 pool]."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        bits: tuple[int, ...],
        pool: bool,
        rng: np.random.Generator,
        name: str,
        weight_bits: int = BRANCH_WEIGHT_BITS,
        fixed_weight_bits: bool = True,
        weight_round_mode: str = "nearest",
    ):
        self.conv = Conv2d(in_channels, out_channels, 3, 1, 1, bias=False, rng=rng)
        self.wq = init_clip_params(
            self.conv.weight.data, "weight", weight_bits, weight_round_mode, fixed_weight_bits, f"{name}.wq"
        )
        self.aq = {b: QuantizerParams(0.0, 1.0, b, "activation", name=f"{name}.aq{b}") for b in bits}
        # 1.0 once the activation clip range has been seeded from real data
        self.aq_ready = np.zeros(len(bits))
        self.bn = {b: BatchNorm2d(out_channels) for b in bits}
        self.pool = pool
        self._bit_index = {b: i for i, b in enumerate(bits)}

    def forward(self, x: Tensor, bits: int) -> Tensor:
        aq = self.aq[bits]
        k = self._bit_index[bits]
        if self.training and not self.aq_ready[k]:
            reinit_from(aq, x.data)
            self.aq_ready[k] = 1.0
        h = self.conv(fake_quantize(x, aq), fake_quantize(self.conv.weight, self.wq))
        h = ops.relu(self.bn[bits](h))
        return ops.maxpool2d(h, 2) if self.pool else h

    def weight_quantizers(self) -> list[QuantizerParams]:
        return [self.wq]


def block_params(block: "QConvBlock", bits: int) -> list[Tensor]:
    """Trainables a forward at ``bits`` reaches inside one block."""
    bn, aq = block.bn[bits], block.aq[bits]
    return [block.conv.weight, block.wq.lower, block.wq.upper, aq.lower, aq.upper, bn.weight, bn.bias]


class Branch(Module):
    def __init__(
        self,
        arch: ArchSpec,
        bits: tuple[int, ...],
        rng: np.random.Generator,
        name: str,
        half: bool = False,
        **block_kw,
    ):
        channels = half_channels(arch.body_channels) if half else arch.body_channels
        self.in_slice = math.ceil(arch.stem_channels / 2) if half else arch.stem_channels
        self.half = half
        self.channels = channels
        self.blocks = []
        c_in = self.in_slice
        for i, (c_out, (_, pool)) in enumerate(zip(channels, arch.body)):
            self.blocks.append(QConvBlock(c_in, c_out, bits, pool, rng, f"{name}.{i}", **block_kw))
            c_in = c_out

    def forward(self, h: Tensor, bits: int) -> Tensor:
        if self.half:
            h = ops.channel_slice(h, 0, self.in_slice)
        for block in self.blocks:
            h = block(h, bits)
        return h

    def macs(self, image_size: int, stem_pool: bool) -> int:
        size = image_size // 2 if stem_pool else image_size
        total = 0
        for block in self.blocks:
            total += block.conv.macs(size, size)
            size = size // 2 if block.pool else size
        return total

    def weight_count(self) -> int:
        return sum(block.conv.weight.data.size for block in self.blocks)


class _Composite(Module):
    """Shared full-precision stem and head around one or more quantized bodies."""

    method = "multiquant"

    def _build_stem_head(self, arch: ArchSpec, rng: np.random.Generator) -> None:
        self.stem = Conv2d(arch.in_channels, arch.stem_channels, 3, 1, 1, bias=True, rng=rng)
        self.head = Linear(arch.body_channels[-1] * arch.feature_size**2, arch.num_classes, rng=rng)

    def _check_bits(self, bits: int) -> int:
        if bits not in self.plan.bit_candidates:
            raise ValueError(f"bit-width {bits} is not a candidate; candidates are {list(self.plan.bit_candidates)}")
        return int(bits)

    @property
    def active_bits(self) -> int:
        return self._active

    def stem_forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ValueError(f"expected NCHW input, got shape {x.shape}")
        h = ops.relu(self.stem(x))
        return ops.maxpool2d(h, 2) if self.arch.stem_pool else h

    def head_forward(self, feats: Tensor) -> Tensor:
        return self.head(ops.flatten(feats))

    def weight_params(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.kind == "weight"]

    def quant_params(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.kind == "quant"]

    def _shared_params(self) -> list[Tensor]:
        return [t for t in (self.stem.weight, self.stem.bias, self.head.weight, self.head.bias) if t is not None]

    def project_quantizers(self) -> None:
        for m in self.modules():
            if isinstance(m, QuantizerParams):
                m.project()


class MultiQuantModel(_Composite):
    """Shared stem -> sum of the selected 2-bit branches -> shared head.

    Switching bit-width only changes which branches are summed and which
    activation quantizer / BN bank each of them uses.
    """

    def __init__(self, arch: ArchSpec, plan: BranchPlan, selection: SelectionMap, seed: int = 0):
        if selection.plan != plan:
            raise ValueError("selection map was built for a different plan")
        rng = np.random.default_rng(seed)
        self.arch, self.plan, self.selection, self.seed = arch, plan, selection, seed
        self._build_stem_head(arch, rng)
        bits = plan.bit_candidates
        self.branches: dict[BranchId, Branch] = {}
        for j in plan.branch_ids:
            self.branches[j] = Branch(arch, bits, rng, f"branches.{j}", half=(j == HALF))
        self._active = plan.max_bits

    def set_bitwidth(self, bits: int) -> None:
        self._active = self._check_bits(bits)

    def active_branches(self) -> tuple[BranchId, ...]:
        return self.selection[self._active]

    def branch_forward(self, j: BranchId, h_stem: Tensor, bits: Optional[int] = None) -> Tensor:
        return self.branches[j](h_stem, self._active if bits is None else self._check_bits(bits))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_from_stem(self.stem_forward(x))

    def forward_from_stem(self, h: Tensor) -> Tensor:
        feats = None
        # fixed branch-index order keeps the reduction bitwise reproducible
        for j in sorted(self.active_branches(), key=branch_sort_key):
            out = self.branches[j](h, self._active)
            feats = out if feats is None else ops.add(feats, out)
        return self.head_forward(feats)

    def weight_quantizers(self) -> list[QuantizerParams]:
        return [b.wq for br in self.branches.values() for b in br.blocks]

    def parameters_for(self, bits: int) -> list[Tensor]:
        """Trainables on the path of a forward at ``bits``; everything else sits idle."""
        out = self._shared_params()
        for j in self.selection[self._check_bits(bits)]:
            for block in self.branches[j].blocks:
                out += block_params(block, bits)
        return out

    def body_macs(self, j: BranchId = 1) -> int:
        return self.branches[j].macs(self.arch.image_size, self.arch.stem_pool)


class SwitchableModel(_Composite):
    """One quantized body whose weight AND activation bit-widths switch per candidate.

    This is the shared-weight baseline family (Any-Precision, AdaBit); only the
    weight rounding mode differs between them.
    """

    def __init__(self, arch: ArchSpec, plan: BranchPlan, method: str = "any-precision", seed: int = 0):
        if method not in ("any-precision", "adabit"):
            raise ValueError(f"unknown baseline method {method!r}")
        rng = np.random.default_rng(seed)
        self.arch, self.plan, self.seed = arch, plan, seed
        self.method = method
        self._build_stem_head(arch, rng)
        mode = "floor" if method == "adabit" else "nearest"
        self.body = Branch(
            arch, plan.bit_candidates, rng, "body",
            weight_bits=plan.max_bits, fixed_weight_bits=False, weight_round_mode=mode,
        )
        self._active = plan.max_bits

    def set_bitwidth(self, bits: int) -> None:
        self._active = self._check_bits(bits)
        for block in self.body.blocks:
            block.wq.bits = self._active

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_from_stem(self.stem_forward(x))

    def forward_from_stem(self, h: Tensor) -> Tensor:
        return self.head_forward(self.body(h, self._active))

    def weight_quantizers(self) -> list[QuantizerParams]:
        return [b.wq for b in self.body.blocks]

    def parameters_for(self, bits: int) -> list[Tensor]:
        out = self._shared_params()
        for block in self.body.blocks:
            out += block_params(block, self._check_bits(bits))
        return out

    def body_macs(self) -> int:
        return self.body.macs(self.arch.image_size, self.arch.stem_pool)


def build_model(arch: ArchSpec, plan: BranchPlan, selection: SelectionMap, seed: int = 0) -> MultiQuantModel:
    return MultiQuantModel(arch, plan, selection, seed)


def set_bitwidth(model: _Composite, bits: int) -> None:
    model.set_bitwidth(bits)


def forward_composed(model: _Composite, x, bits: int) -> Tensor:
    model.set_bitwidth(bits)
    return model(x if isinstance(x, Tensor) else Tensor(x))
