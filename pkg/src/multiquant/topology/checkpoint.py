"""Versioned little-endian checkpoint container.

Layout::

    b"MQCK" | u16 version | u32 header length | JSON header | payload

The header carries the arch spec (and its hash), candidate bits, strategy,
selection map and an index of payload blobs. MultiQuant branch weights are
stored as packed 2-bit codes (quantizer header + bitstream); every other array
(BN banks, clip bounds, stem/head) as float64. On load, branch weights are set
to grid values that re-quantize to the stored codes, so eval outputs match the
saved model exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..quantizer import deserialize_codes, reconstruct_latent, serialize_codes, weight_codes
from .model import ArchSpec, MultiQuantModel, SwitchableModel
from .plan import build_branch_plan, build_selection_map

MAGIC = b"MQCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def _packed_layers(model) -> dict[str, object]:
    if not isinstance(model, MultiQuantModel):
        return {}
    out = {}
    for j, br in model.branches.items():
        for i, block in enumerate(br.blocks):
            out[f"branches.{j}.blocks.{i}.conv.weight"] = block
    return out


def save_checkpoint(model, path: Union[str, Path]) -> int:
    """Write ``model`` to ``path``; returns the file size in bytes."""
    packed = _packed_layers(model)
    blobs, index_packed, index_arrays = [], [], []
    offset = 0
    for name, block in packed.items():
        w = block.conv.weight.data
        blob = serialize_codes(weight_codes(w, block.wq), block.wq)
        index_packed.append({"name": name, "shape": list(w.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    for name, arr in model.named_arrays():
        if name in packed:
            continue
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index_arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "method": model.method,
        "arch": model.arch.to_json(),
        "arch_hash": model.arch.digest(),
        "bits": list(model.plan.bit_candidates),
        "strategy": model.selection.strategy if isinstance(model, MultiQuantModel) else None,
        "map": model.selection.as_json() if isinstance(model, MultiQuantModel) else None,
        "seed": model.seed,
        "active_bits": model.active_bits,
        "packed": index_packed,
        "arrays": index_arrays,
    }
    head = json.dumps(header, sort_keys=True).encode()
    data = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(data)
    return len(data)


def read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CheckpointError("truncated header")
    header = json.loads(buf[_PREFIX.size : start].decode())
    return header, start


def load_checkpoint(path: Union[str, Path]):
    buf = Path(path).read_bytes()
    header, base = read_header(buf)
    arch = ArchSpec.from_json(header["arch"])
    if arch.digest() != header["arch_hash"]:
        raise CheckpointError("arch spec hash mismatch")
    plan = build_branch_plan(header["bits"])
    if header["method"] == "multiquant":
        selection = build_selection_map(plan, "explicit", {int(k): v for k, v in header["map"].items()})
        selection = type(selection)(selection.selection, header["strategy"], plan)
        model = MultiQuantModel(arch, plan, selection, header["seed"])
    else:
        model = SwitchableModel(arch, plan, header["method"], header["seed"])

    def blob(entry):
        lo, hi = base + entry["offset"], base + entry["offset"] + entry["nbytes"]
        if hi > len(buf):
            raise CheckpointError(f"payload for {entry['name']} is truncated")
        return buf[lo:hi]

    state = model.state_dict()
    for entry in header["arrays"]:
        state[entry["name"]] = np.frombuffer(blob(entry), dtype="<f8").reshape(entry["shape"])
    blocks = _packed_layers(model)
    for entry in header["packed"]:
        count = int(np.prod(entry["shape"]))
        lo, hi, bits, codes = deserialize_codes(blob(entry), count)
        state[entry["name"]] = reconstruct_latent(codes, lo, hi, 2**bits - 1).reshape(entry["shape"])
        if entry["name"] not in blocks:
            raise CheckpointError(f"unexpected packed layer {entry['name']}")
    model.load_state_dict(state)
    model.set_bitwidth(header["active_bits"])
    return model
