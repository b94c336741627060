"""Central-difference gradient checks that understand quantized graphs.

The loss is re-evaluated under a replay probe, so rounding contributes a
frozen offset and the comparison is against the straight-through surrogate.
Elements whose perturbation flips any discrete state (relu sign, pool argmax,
clip saturation, rounding code) are skipped rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .probe import SurrogateProbe, probing
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def conclusive(self) -> bool:
        return self.checked > 0

    def passed(self, tol: float) -> bool:
        return self.conclusive and self.max_rel_error <= tol


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    epsilon: float = 1e-5,
    atol: float = 1e-8,
) -> GradCheckResult:
    """Compare ``param.grad`` from one backward pass of ``loss_fn`` with central differences.

    ``loss_fn`` must rebuild the graph on every call. Relative error per
    element is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not param.requires_grad:
        raise ValueError("param does not require grad")
    param.zero_grad()
    base = SurrogateProbe()
    with probing(base):
        loss = loss_fn()
    loss.backward()
    analytic = param.grad.copy()

    flat = param.data.reshape(-1)
    numeric = np.full(flat.shape, np.nan)
    worst, checked, skipped = 0.0, 0, 0
    for i in range(flat.size):
        orig = flat[i]
        values, smooth = [], True
        for sign in (1.0, -1.0):
            flat[i] = orig + sign * epsilon
            replay = SurrogateProbe(base.offsets)
            with probing(replay), no_grad():
                values.append(loss_fn().item())
            smooth = smooth and replay.same_structure(base)
        flat[i] = orig
        if not smooth:
            skipped += 1
            continue
        n = (values[0] - values[1]) / (2 * epsilon)
        a = analytic.reshape(-1)[i]
        numeric[i] = n
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), atol))
        checked += 1
    return GradCheckResult(worst, checked, skipped, analytic, numeric.reshape(param.shape))
