"""Hooks that let gradient checks see the piecewise structure of a forward pass.

Ops with kinks (relu, max-pool, clip) report their discrete state, and
rounding sites report their codes. A probe in *replay* mode substitutes the
frozen rounding offsets ``round(v) - v`` recorded at the base point, which
turns the quantized forward into the straight-through surrogate: the same
value at the base point, differentiable with slope one through rounding.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional

import numpy as np


class SurrogateProbe:
    def __init__(self, offsets: Optional[list[np.ndarray]] = None):
        self.replay = offsets is not None
        self.offsets: list[np.ndarray] = list(offsets) if offsets is not None else []
        self.states: list[np.ndarray] = []
        self._cursor = 0

    def note(self, state: np.ndarray) -> None:
        self.states.append(np.array(state, copy=True))

    def round(self, scaled: np.ndarray, codes: np.ndarray) -> np.ndarray:
        self.note(codes)
        if not self.replay:
            self.offsets.append(codes - scaled)
            return codes
        if self._cursor >= len(self.offsets):
            raise RuntimeError("replayed forward visits more rounding sites than the recorded one")
        off = self.offsets[self._cursor]
        self._cursor += 1
        return scaled + off

    def same_structure(self, other: "SurrogateProbe") -> bool:
        if len(self.states) != len(other.states):
            return False
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.states, other.states))


_PROBE: Optional[SurrogateProbe] = None


def active() -> Optional[SurrogateProbe]:
    return _PROBE


@contextlib.contextmanager
def probing(probe: SurrogateProbe) -> Iterator[SurrogateProbe]:
    global _PROBE
    prev = _PROBE
    _PROBE = probe
    try:
        yield probe
    finally:
        _PROBE = prev
