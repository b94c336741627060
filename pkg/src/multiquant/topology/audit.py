"""Compute-cost and storage accounting for composed and single-body models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

from ..quantizer import CODE_HEADER, QuantizerParams, packed_size
from .model import MultiQuantModel, SwitchableModel
from .plan import HALF, BranchPlan, SelectionMap

FP_BITS = 32
FP_BYTES = FP_BITS // 8


@dataclass(frozen=True)
class CostRow:
    bits: int
    multiquant: float
    reference: float

    @property
    def parity(self) -> bool:
        return self.multiquant == self.reference


def compute_cost(
    plan: BranchPlan,
    selection: SelectionMap,
    bits: int,
    macs_per_body: int,
    half_macs: Optional[float] = None,
) -> CostRow:
    """MAC-bit units: each selected branch runs 2-bit weights against ``bits``-bit activations.

    A half branch contributes ``half_macs`` (defaults to half a body).
    """
    if bits not in plan.bit_candidates:
        raise ValueError(f"bit-width {bits} is not a candidate")
    half = macs_per_body / 2 if half_macs is None else half_macs
    total = 0.0
    for j in selection[bits]:
        total += 2 * bits * (half if j == HALF else macs_per_body)
    return CostRow(bits, total, float(bits * bits * macs_per_body))


@dataclass
class StorageReport:
    method: str
    body_bits: int
    body_weight_count: int
    body_payload_bytes: int
    body_fp32_bytes: int
    quantizer_header_bytes: int
    bn_bytes: int
    stem_head_bytes: int
    per_branch_payload: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.body_payload_bytes + self.quantizer_header_bytes + self.bn_bytes + self.stem_head_bytes

    @property
    def size_mb(self) -> float:
        return self.total_bytes / 1e6

    @property
    def body_compression(self) -> float:
        return self.body_fp32_bytes / self.body_payload_bytes

    def as_dict(self) -> dict:
        d = asdict(self)
        d["per_branch_payload"] = {str(k): v for k, v in self.per_branch_payload.items()}
        d.update(total_bytes=self.total_bytes, size_mb=self.size_mb, body_compression=self.body_compression)
        return d


def _fp_bytes(tensors) -> int:
    return sum(t.data.size for t in tensors if t is not None) * FP_BYTES


def _common(model) -> tuple[int, int, int]:
    quant = sum(CODE_HEADER.size for m in model.modules() if isinstance(m, QuantizerParams))
    bn = 0
    for name, arr in model.named_arrays():
        if ".bn." in name:
            bn += arr.size * FP_BYTES
    stem_head = _fp_bytes([model.stem.weight, model.stem.bias, model.head.weight, model.head.bias])
    return quant, bn, stem_head


def storage_report(model) -> StorageReport:
    """Deployed size, itemized. Full-precision values are counted at 32 bits.

    Body payload packing is per layer (each layer's codes start on a byte boundary).
    """
    quant, bn, stem_head = _common(model)
    if isinstance(model, MultiQuantModel):
        per_branch = {}
        count = 0
        for j, br in model.branches.items():
            per_branch[j] = sum(packed_size(b.conv.weight.data.size, b.wq.bits) for b in br.blocks)
            count += br.weight_count()
        return StorageReport(
            "multiquant", 2, count, sum(per_branch.values()), count * FP_BYTES, quant, bn, stem_head, per_branch
        )
    if isinstance(model, SwitchableModel):
        count = model.body.weight_count()
        if model.method == "any-precision":
            bits, payload = FP_BITS, count * FP_BYTES
        else:
            bits = model.plan.max_bits
            payload = sum(packed_size(b.conv.weight.data.size, bits) for b in model.body.blocks)
        return StorageReport(model.method, bits, count, payload, count * FP_BYTES, quant, bn, stem_head, {"body": payload})
    raise TypeError(f"no storage accounting for {type(model).__name__}")
