"""Mean-squared quantization error models for normally distributed weights.

The analytic model splits the error into clipping noise (mass beyond the clip
bound) and quantization noise (uniform rounding error inside it). The
Monte-Carlo estimator pushes real samples through the actual quantizer and is
the arbiter between the two clipping-term variants.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import Tensor
from .engine.ops import conv2d
from .quantizer import QuantizerParams, dequantize, init_clip_params, normalize, quantize

CLIP_VARIANTS = ("as-written", "squared")
BIN_DENOMINATORS = ("pow2", "exact-bin")
CSV_HEADER = ["b", "u", "variant", "clip", "quant", "analytic_total", "mc_total", "rel_gap"]
SUPPORT_EPS = 1e-6


@dataclass(frozen=True)
class ErrorModelConfig:
    u: float
    bits: int
    clipping_variant: str = "squared"
    denominator: str = "pow2"
    distribution: str = "normal"
    n_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.distribution != "normal":
            raise ValueError(f"unsupported weight distribution {self.distribution!r}; only 'normal' is modelled")
        if self.clipping_variant not in CLIP_VARIANTS:
            raise ValueError(f"clipping_variant must be one of {CLIP_VARIANTS}")
        if self.denominator not in BIN_DENOMINATORS:
            raise ValueError(f"denominator must be one of {BIN_DENOMINATORS}")
        if not self.u > 0:
            raise ValueError("clip bound u must be positive")
        if self.bits < 2:
            raise ValueError("bit-width must be at least 2")
        if self.n_samples < 10_000:
            raise ValueError("n_samples must be at least 1e4")


@dataclass
class MSQEReport:
    bits: int
    u: float
    variant: str
    clipping_noise: float
    quantization_noise: float
    total_analytic: float
    total_monte_carlo: Optional[float] = None
    relative_gap: Optional[float] = None

    def csv_row(self) -> list:
        return [
            self.bits,
            self.u,
            self.variant,
            self.clipping_noise,
            self.quantization_noise,
            self.total_analytic,
            "" if self.total_monte_carlo is None else self.total_monte_carlo,
            "" if self.relative_gap is None else self.relative_gap,
        ]


def _pdf(u: float) -> float:
    return math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


def _tail(u: float) -> float:
    return 0.5 * math.erfc(u / math.sqrt(2.0))


def clipping_noise(u: float, variant: str = "squared") -> float:
    """Two-sided tail integral of the standard normal beyond ``+-u``.

    ``as-written`` integrates ``(w - u)``, ``squared`` integrates ``(w - u)**2``.
    """
    if variant == "as-written":
        return 2.0 * (_pdf(u) - u * _tail(u))
    if variant == "squared":
        return 2.0 * ((1.0 + u * u) * _tail(u) - u * _pdf(u))
    raise ValueError(f"unknown clipping variant {variant!r}")


def quantization_noise(u: float, bits: int, denominator: str = "pow2") -> float:
    if denominator == "pow2":
        return u * u / (3.0 * 2.0 ** (2 * bits))
    if denominator == "exact-bin":
        return u * u / (3.0 * (2.0**bits - 1.0) ** 2)
    raise ValueError(f"unknown denominator {denominator!r}")


def msqe_analytic(cfg: ErrorModelConfig) -> MSQEReport:
    clip = clipping_noise(cfg.u, cfg.clipping_variant)
    quant = quantization_noise(cfg.u, cfg.bits, cfg.denominator)
    return MSQEReport(cfg.bits, cfg.u, cfg.clipping_variant, clip, quant, clip + quant)


def msqe_monte_carlo(cfg: ErrorModelConfig) -> float:
    """Mean of ``(w - w_hat)**2`` for ``w ~ N(0, 1)`` through the nearest-rounding weight quantizer with ``l = -u``.

    The dequantized value lives in ``[-1, 1]``; it is mapped back onto the clip
    range (times ``u``) so the error is measured in the weights' own units.
    """
    rng = np.random.default_rng(cfg.seed)
    w = rng.standard_normal(cfg.n_samples)
    p = QuantizerParams(-cfg.u, cfg.u, cfg.bits, "weight", "nearest")
    w_hat = cfg.u * dequantize(quantize(normalize(w, p), p), p)
    return float(np.mean((w - w_hat) ** 2))


def msqe_report(cfg: ErrorModelConfig) -> MSQEReport:
    report = msqe_analytic(cfg)
    mc = msqe_monte_carlo(cfg)
    report.total_monte_carlo = mc
    report.relative_gap = abs(report.total_analytic - mc) / mc
    return report


def accumulated_msqe(
    bits: Iterable[int],
    u: float,
    clipping_variant: str = "squared",
    denominator: str = "pow2",
) -> float:
    """Sum of analytic totals over every candidate bit-width."""
    bits = list(bits)
    if not bits:
        raise ValueError("bit set must be nonempty")
    return math.fsum(
        msqe_analytic(ErrorModelConfig(u, b, clipping_variant, denominator)).total_analytic for b in bits
    )


def msqe_table(
    bits: Sequence[int],
    us: Sequence[float],
    variants: Sequence[str] = CLIP_VARIANTS,
    denominator: str = "pow2",
    n_samples: int = 1_000_000,
    seed: int = 0,
) -> list[MSQEReport]:
    rows = []
    for b in bits:
        for u in us:
            mc = msqe_monte_carlo(ErrorModelConfig(u, b, n_samples=n_samples, seed=seed))
            for variant in variants:
                r = msqe_analytic(ErrorModelConfig(u, b, variant, denominator, n_samples=n_samples, seed=seed))
                r.total_monte_carlo = mc
                r.relative_gap = abs(r.total_analytic - mc) / mc
                rows.append(r)
    return rows


def write_msqe_csv(rows: Iterable[MSQEReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(r.csv_row())


@dataclass
class TransplantReport:
    residual: float
    activation_noise: float
    weight_noise: float
    support_fraction: float
    conclusive: bool

    def as_dict(self) -> dict:
        return asdict(self)


def quantize_activations(a: np.ndarray, bits: int) -> np.ndarray:
    """Activation fake quantization mapped back to the input's units (``l + (u - l) * x_bar``)."""
    p = init_clip_params(a, "activation", bits)
    lo, hi = float(p.lower.data), float(p.upper.data)
    return lo + (hi - lo) * dequantize(quantize(normalize(a, p), p), p)


def noise_transplant_residual(
    w: np.ndarray,
    a: np.ndarray,
    bits: int = 4,
    a_bar: Optional[np.ndarray] = None,
    padding: int = 1,
    min_support: float = 0.5,
) -> TransplantReport:
    """How well a single weight perturbation reproduces the effect of activation noise.

    ``lhs = conv(w, a_bar)``; the weight noise ``n_w`` is the least-squares
    solution of ``conv(w * (1 + n_w), a) ~= lhs``, and the return value carries
    ``||lhs - conv(w * (1 + n_w), a)|| / ||lhs||``.
    """
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    a_bar = quantize_activations(a, bits) if a_bar is None else np.asarray(a_bar, dtype=np.float64)
    support = np.abs(a) >= SUPPORT_EPS
    frac = float(support.mean())
    if frac < min_support:
        return TransplantReport(float("nan"), float("nan"), float("nan"), frac, False)
    n_a = np.where(support, a_bar / np.where(support, a, 1.0) - 1.0, 0.0)

    lhs = conv2d(Tensor(a_bar), Tensor(w), padding=padding).data
    base = conv2d(Tensor(a), Tensor(w), padding=padding).data
    o, c, kh, kw = w.shape
    n = a.shape[0]
    # im2col of a via an identity kernel bank: one output channel per (c, i, j) tap
    taps = np.zeros((c * kh * kw, c, kh, kw))
    for idx, (ci, i, j) in enumerate(np.ndindex(c, kh, kw)):
        taps[idx, ci, i, j] = 1.0
    cols = conv2d(Tensor(a), Tensor(taps), padding=padding).data
    design = cols.transpose(0, 2, 3, 1).reshape(-1, c * kh * kw)
    target = (lhs - base).transpose(0, 2, 3, 1).reshape(-1, o)
    delta, *_ = np.linalg.lstsq(design, target, rcond=None)
    delta_w = delta.T.reshape(o, c, kh, kw)
    rhs = conv2d(Tensor(a), Tensor(w + delta_w), padding=padding).data

    denom = np.linalg.norm(lhs)
    residual = float(np.linalg.norm(lhs - rhs) / denom) if denom > 0 else 0.0
    nz = np.abs(w) > 0
    n_w = np.where(nz, delta_w / np.where(nz, w, 1.0), 0.0)
    return TransplantReport(
        residual=residual,
        activation_noise=float(np.mean(np.abs(n_a[support]))),
        weight_noise=float(np.mean(np.abs(n_w[nz]))) if nz.any() else 0.0,
        support_fraction=frac,
        conclusive=True,
    )
