"""Branch inventory and per-bit-width branch selection."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

HALF = "H"
BranchId = Union[int, str]
STRATEGIES = ("serial", "amortized", "explicit")


def branch_sort_key(j: BranchId) -> tuple[int, int]:
    return (1, 0) if j == HALF else (0, int(j))


@dataclass(frozen=True)
class BranchPlan:
    bit_candidates: tuple[int, ...]
    n_full_branches: int
    has_half_branch: bool

    @property
    def branch_ids(self) -> tuple[BranchId, ...]:
        ids: tuple[BranchId, ...] = tuple(range(1, self.n_full_branches + 1))
        return ids + ((HALF,) if self.has_half_branch else ())

    @property
    def branch_width_factors(self) -> dict[BranchId, float]:
        return {j: (0.5 if j == HALF else 1.0) for j in self.branch_ids}

    @property
    def max_bits(self) -> int:
        return self.bit_candidates[-1]


def build_branch_plan(bits: Iterable[int]) -> BranchPlan:
    cands = sorted({int(b) for b in bits})
    if not cands:
        raise ValueError("bit candidate set is empty")
    low = [b for b in cands if b < 2]
    if low:
        raise ValueError(f"candidates {low} are below 2 bits and cannot be composed from 2-bit branches")
    return BranchPlan(tuple(cands), cands[-1] // 2, any(b % 2 for b in cands))


@dataclass(frozen=True)
class SelectionMap:
    selection: Mapping[int, tuple[BranchId, ...]]
    strategy: str
    plan: BranchPlan = field(compare=False)

    def __getitem__(self, bits: int) -> tuple[BranchId, ...]:
        return self.selection[bits]

    def usage_counts(self) -> dict[BranchId, int]:
        counts = {j: 0 for j in self.plan.branch_ids}
        for members in self.selection.values():
            for j in members:
                counts[j] += 1
        return counts

    def as_json(self) -> dict[str, list]:
        return {str(b): list(self.selection[b]) for b in sorted(self.selection)}


def _ordered(members: Iterable[BranchId]) -> tuple[BranchId, ...]:
    return tuple(sorted(set(members), key=branch_sort_key))


def _serial(plan: BranchPlan) -> dict[int, tuple[BranchId, ...]]:
    return {b: _ordered(list(range(1, b // 2 + 1)) + ([HALF] if b % 2 else [])) for b in plan.bit_candidates}


def _amortized(plan: BranchPlan) -> dict[int, tuple[BranchId, ...]]:
    # Each branch carries a load: the sum over the bit-widths it serves of that bit-width's
    # relative quantization noise 4**-b. Candidates are placed smallest first (the largest is
    # fixed to every full branch and loaded up front); each takes the subset whose sorted
    # load vector is lexicographically smallest, ties going to the lowest branch indices.
    full = list(range(1, plan.n_full_branches + 1))
    top = plan.max_bits
    load = {j: 4.0**-top for j in full}
    chosen = {top: _ordered(full + ([HALF] if top % 2 else []))}
    for b in plan.bit_candidates[:-1]:
        w = 4.0**-b

        def score(subset):
            after = [load[j] + (w if j in subset else 0.0) for j in full]
            return sorted(after, reverse=True), subset

        best = min(itertools.combinations(full, b // 2), key=score)
        for j in best:
            load[j] += w
        chosen[b] = _ordered(list(best) + ([HALF] if b % 2 else []))
    return chosen


def validate_selection(plan: BranchPlan, selection: Mapping[int, Iterable[BranchId]]) -> dict[int, tuple[BranchId, ...]]:
    sel = {int(b): _ordered(_coerce(j) for j in members) for b, members in selection.items()}
    problems = []
    if set(sel) != set(plan.bit_candidates):
        problems.append(f"map covers {sorted(sel)} but candidates are {list(plan.bit_candidates)}")
    valid = set(plan.branch_ids)
    for b, members in sel.items():
        bad = [j for j in members if j not in valid]
        if bad:
            problems.append(f"P({b}) names unknown branches {bad}")
        n_full = sum(1 for j in members if j != HALF)
        if n_full != b // 2:
            problems.append(f"|P({b})| has {n_full} full branches, needs {b // 2}")
        if (HALF in members) != bool(b % 2):
            problems.append(f"P({b}) must {'include' if b % 2 else 'exclude'} the half branch")
    if plan.max_bits in sel:
        missing = [j for j in range(1, plan.n_full_branches + 1) if j not in sel[plan.max_bits]]
        if missing:
            problems.append(f"largest bit-width must use every full branch, missing {missing}")
    if problems:
        raise ValueError("invalid selection map: " + "; ".join(problems))
    return sel


def _coerce(j) -> BranchId:
    if j == HALF:
        return HALF
    return int(j)


def build_selection_map(
    plan: BranchPlan,
    strategy: str = "amortized",
    explicit: Optional[Mapping[int, Iterable[BranchId]]] = None,
) -> SelectionMap:
    if strategy == "serial":
        sel = _serial(plan)
    elif strategy == "amortized":
        sel = _amortized(plan)
    elif strategy == "explicit":
        if explicit is None:
            raise ValueError("explicit strategy needs a user-supplied map")
        sel = explicit
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")
    return SelectionMap(validate_selection(plan, sel), strategy, plan)
