"""Uniform fake quantization with trainable clipping bounds.

A value is normalized into [0, 1] by the clip bounds ``(l, u)``, rounded to one
of ``2**b`` integer codes and mapped back: weights to ``[-1, 1]``, activations
to ``[0, 1]``. Rounding passes gradients straight through; the clip and the
affine maps are differentiated exactly, including with respect to ``l`` and
``u``.
"""

from __future__ import annotations

import logging
import struct
from typing import Union

import numpy as np

from .engine import probe
from .engine.nn import Module
from .engine.tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)

MIN_GAP = 1e-4
ROLES = ("weight", "activation")
ROUND_MODES = ("nearest", "floor")

# (l, u, b) ahead of every packed code stream
CODE_HEADER = struct.Struct("<ddB")

ArrayLike = Union[np.ndarray, Tensor, float]


class QuantizerParams(Module):
    """Clip bounds ``lower``/``upper`` (trainable scalars) plus bit-width, role and rounding mode.

    With ``fixed_bits=True`` the bit-width cannot be reassigned after
    construction; MultiQuant branch weight quantizers are built this way.
    """

    def __init__(
        self,
        lower: float,
        upper: float,
        bits: int,
        role: str = "weight",
        round_mode: str = "nearest",
        fixed_bits: bool = False,
        name: str = "",
    ):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        if round_mode not in ROUND_MODES:
            raise ValueError(f"round_mode must be one of {ROUND_MODES}, got {round_mode!r}")
        if int(bits) < 1:
            raise ValueError(f"bit-width must be positive, got {bits}")
        self.lower = Tensor(float(lower), requires_grad=True, kind="quant", name=f"{name}.l")
        self.upper = Tensor(float(upper), requires_grad=True, kind="quant", name=f"{name}.u")
        self._bits = int(bits)
        self._fixed_bits = fixed_bits
        self.role = role
        self.round_mode = round_mode
        self.name = name
        self.gap_projections = 0
        self.project()

    @property
    def bits(self) -> int:
        return self._bits

    @bits.setter
    def bits(self, value: int) -> None:
        if self._fixed_bits:
            raise AttributeError(f"quantizer {self.name!r} has a fixed bit-width of {self._bits}")
        if int(value) < 1:
            raise ValueError(f"bit-width must be positive, got {value}")
        self._bits = int(value)

    @property
    def fixed_bits(self) -> bool:
        return self._fixed_bits

    @property
    def levels(self) -> int:
        return 2**self._bits - 1

    def project(self) -> None:
        """Keep ``u - l >= MIN_GAP`` by raising ``u``; counts each projection."""
        if self.upper.data - self.lower.data < MIN_GAP:
            self.upper.data[...] = self.lower.data + MIN_GAP
            self.gap_projections += 1
            logger.warning("quantizer %s: clip interval collapsed, projected to minimum gap", self.name)

    def __repr__(self) -> str:
        return (
            f"QuantizerParams(l={float(self.lower.data):.4g}, u={float(self.upper.data):.4g}, "
            f"b={self._bits}, role={self.role}, round_mode={self.round_mode})"
        )


def _data(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def normalize(x: ArrayLike, p: QuantizerParams) -> np.ndarray:
    p.project()
    lo, hi = float(p.lower.data), float(p.upper.data)
    return np.clip((_data(x) - lo) / (hi - lo), 0.0, 1.0)


def quantize(x_n: ArrayLike, p: QuantizerParams) -> np.ndarray:
    v = p.levels * _data(x_n)
    codes = np.floor(v) if p.round_mode == "floor" else round_half_away(v)
    return codes.astype(np.int64)


def _affine(role: str) -> tuple[float, float]:
    return (2.0, -1.0) if role == "weight" else (1.0, 0.0)


def dequantize(q: ArrayLike, p: QuantizerParams) -> np.ndarray:
    q = np.asarray(_data(q) if isinstance(q, Tensor) else q)
    if q.size and (q.min() < 0 or q.max() > p.levels):
        raise ValueError(f"codes outside [0, {p.levels}] for a {p.bits}-bit quantizer")
    a, b = _affine(p.role)
    return a * (q / p.levels) + b


def fake_quantize(x: Tensor, p: QuantizerParams) -> Tensor:
    """Quantize-dequantize ``x`` as a graph node with parents ``x``, ``l`` and ``u``."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"fake-quantize {p.name or '?'}: nonfinite input")
    p.project()
    lo, hi = p.lower.data, p.upper.data
    gap = hi - lo
    t = (x.data - lo) / gap
    inside = (t >= 0.0) & (t <= 1.0)
    levels = p.levels
    scaled = levels * np.clip(t, 0.0, 1.0)
    codes = np.floor(scaled) if p.round_mode == "floor" else round_half_away(scaled)
    pr = probe.active()
    if pr is not None:
        pr.note(inside)
        codes = pr.round(scaled, codes)
    a, b = _affine(p.role)
    out = a * (codes / levels) + b

    def backward(g):
        gt = np.where(inside, g * a, 0.0)
        gx = gt / gap
        gl = np.sum(gt * (x.data - hi)) / gap**2
        gu = -np.sum(gt * (x.data - lo)) / gap**2
        return gx, np.asarray(gl), np.asarray(gu)

    return Tensor.from_op(out, (x, p.lower, p.upper), "fake-quantize", backward, quantizer=p)


def init_clip_params(
    x: ArrayLike,
    role: str,
    bits: int,
    round_mode: str = "nearest",
    fixed_bits: bool = False,
    name: str = "",
) -> QuantizerParams:
    """Weights: symmetric ``+-3 sigma``. Activations: ``[0, p99.9]`` of the batch.

    A zero-variance tensor falls back to ``(-1, 1)``.
    """
    data = _data(x)
    if data.size == 0:
        raise ValueError("cannot initialise clip bounds from an empty tensor")
    lo, hi = -1.0, 1.0
    if float(np.std(data)) > 0:
        if role == "weight":
            sigma = float(np.std(data))
            lo, hi = -3.0 * sigma, 3.0 * sigma
        else:
            top = float(np.percentile(data, 99.9))
            if top > MIN_GAP:
                lo, hi = 0.0, top
    return QuantizerParams(lo, hi, bits, role, round_mode, fixed_bits, name)


def reinit_from(p: QuantizerParams, x: ArrayLike) -> None:
    """Overwrite ``p``'s bounds in place with :func:`init_clip_params` values for ``x``."""
    fresh = init_clip_params(x, p.role, p.bits)
    p.lower.data[...] = fresh.lower.data
    p.upper.data[...] = fresh.upper.data


def pack_codes(q: np.ndarray, bits: int) -> bytes:
    """Little-endian bitstream, ``bits`` per code, row-major; first code in the low bits of byte 0."""
    flat = np.asarray(q).reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= 2**bits):
        raise ValueError(f"codes do not fit in {bits} bits")
    planes = (flat.astype(np.uint64)[:, None] >> np.arange(bits, dtype=np.uint64)) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    need = (count * bits + 7) // 8
    if len(buf) < need:
        raise ValueError(f"payload has {len(buf)} bytes, {need} needed for {count} codes")
    planes = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=need), bitorder="little", count=count * bits)
    return (planes.reshape(count, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def serialize_codes(q: np.ndarray, p: QuantizerParams) -> bytes:
    return CODE_HEADER.pack(float(p.lower.data), float(p.upper.data), p.bits) + pack_codes(q, p.bits)


def deserialize_codes(buf: bytes, count: int) -> tuple[float, float, int, np.ndarray]:
    lo, hi, bits = CODE_HEADER.unpack_from(buf)
    return lo, hi, bits, unpack_codes(buf[CODE_HEADER.size :], bits, count)


def weight_codes(w: ArrayLike, p: QuantizerParams) -> np.ndarray:
    return quantize(normalize(w, p), p)


def reconstruct_latent(codes: np.ndarray, lower: float, upper: float, levels: int) -> np.ndarray:
    """Full-precision values sitting exactly on the grid that re-quantize to ``codes``."""
    return lower + (upper - lower) * (np.asarray(codes, dtype=np.float64) / levels)

