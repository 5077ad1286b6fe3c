"""Overlapping populations as disjoint strata.

A stratum is identified by the set ``J`` of hypotheses (1-based) whose
sub-populations contain it. Internally ``J`` is a bitmask where bit ``i-1``
stands for hypothesis ``i``; the public API accepts any iterable of ints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .exceptions import ValidationError

MAX_HYPOTHESES = 24
SUM_TOL = 1e-9


def to_mask(subset: Iterable[int] | int) -> int:
    """Encode a set of 1-based hypothesis indices as a bitmask."""
    if isinstance(subset, int):
        if subset <= 0:
            raise ValidationError("subset bitmask must be positive")
        return subset
    mask = 0
    for i in subset:
        i = int(i)
        if i < 1 or i > MAX_HYPOTHESES:
            raise ValidationError(f"hypothesis index {i} outside 1..{MAX_HYPOTHESES}")
        mask |= 1 << (i - 1)
    if mask == 0:
        raise ValidationError("strata must have a non-empty index set")
    return mask


def from_mask(mask: int) -> frozenset[int]:
    """Decode a bitmask into a frozenset of 1-based indices."""
    return frozenset(i + 1 for i in range(mask.bit_length()) if mask >> i & 1)


def mask_indices(mask: int) -> tuple[int, ...]:
    """0-based indices of the set bits, ascending."""
    mask = int(mask)
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


@dataclass(frozen=True)
class PopulationStructure:
    """Disjoint strata with prevalences, ordered by ascending bitmask."""

    m: int
    strata: tuple[tuple[int, float], ...]

    @property
    def masks(self) -> tuple[int, ...]:
        return tuple(mask for mask, _ in self.strata)

    @property
    def prevalences(self) -> tuple[float, ...]:
        return tuple(pi for _, pi in self.strata)

    def subsets(self) -> list[frozenset[int]]:
        return [from_mask(mask) for mask in self.masks]

    def population_prevalence(self, i: int) -> float:
        """Prevalence of sub-population ``i`` (sum over strata containing it)."""
        bit = 1 << (i - 1)
        return sum(pi for mask, pi in self.strata if mask & bit)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "strata": [{"subset": sorted(from_mask(mask)), "pi": pi} for mask, pi in self.strata],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> "PopulationStructure":
        try:
            strata = [(entry["subset"], entry["pi"]) for entry in data["strata"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed structure document: {exc}") from None
        return make_structure(strata, m=data.get("m"))

    @classmethod
    def from_json(cls, text: str) -> "PopulationStructure":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc.msg}") from None
        return cls.from_dict(data)


def make_structure(strata: Sequence[tuple[Iterable[int] | int, float]],
                   m: int | None = None) -> PopulationStructure:
    """Validate strata and build a :class:`PopulationStructure`.

    Zero-prevalence strata are dropped after validation. ``m`` defaults to the
    largest hypothesis index that appears.

    Raises:
        ValidationError: on an empty list, duplicate subsets, negative
            prevalences, prevalences not summing to one, or a hypothesis that
            appears in no stratum.
    """
    if not strata:
        raise ValidationError("at least one stratum is required")
    seen: dict[int, float] = {}
    for subset, pi in strata:
        mask = to_mask(subset)
        pi = float(pi)
        if not pi >= 0.0:
            raise ValidationError(f"prevalence must be non-negative, got {pi}")
        if mask in seen:
            raise ValidationError(f"duplicate stratum {sorted(from_mask(mask))}")
        seen[mask] = pi
    total = sum(seen.values())
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"prevalences sum to {total:.12g}, expected 1")
    union = 0
    for mask in seen:
        union |= mask
    top = union.bit_length()
    if m is None:
        m = top
    m = int(m)
    if m < top or m > MAX_HYPOTHESES:
        raise ValidationError(f"m={m} inconsistent with strata (need {top}..{MAX_HYPOTHESES})")
    missing = [i + 1 for i in range(m) if not union >> i & 1]
    if missing:
        raise ValidationError(f"hypotheses {missing} appear in no stratum")
    kept = tuple(sorted((mask, pi) for mask, pi in seen.items() if pi > 0.0))
    return PopulationStructure(m=m, strata=kept)


def nested_structure(tail_probs: Sequence[float]) -> PopulationStructure:
    """Strata for nested populations P_1 > P_2 > ... > P_m.

    ``tail_probs[i-1]`` is the prevalence of P_i; the first must be 1 and the
    sequence strictly decreasing and positive. Stratum ``{1..i}`` receives
    ``p_i - p_{i+1}``.
    """
    p = [float(v) for v in tail_probs]
    if not p:
        raise ValidationError("need at least one population")
    if abs(p[0] - 1.0) > SUM_TOL:
        raise ValidationError("the outermost population must have prevalence 1")
    if p[-1] <= 0.0:
        raise ValidationError("prevalences must be positive")
    if any(b >= a for a, b in zip(p, p[1:])):
        raise ValidationError("nested prevalences must be strictly decreasing")
    p.append(0.0)
    strata = [(range(1, i + 2), p[i] - p[i + 1]) for i in range(len(p) - 1)]
    return make_structure(strata, m=len(p) - 1)


def hypotheses_affecting(structure: PopulationStructure, J: Iterable[int] | int) -> frozenset[int]:
    """Hypotheses whose false rejection affects stratum ``J``: ``J`` restricted to 1..m."""
    mask = to_mask(J) & ((1 << structure.m) - 1)
    return from_mask(mask)


def strata_containing(structure: PopulationStructure, i: int) -> list[frozenset[int]]:
    """All stored strata whose index set contains hypothesis ``i``."""
    if not 1 <= i <= structure.m:
        raise ValidationError(f"hypothesis index {i} outside 1..{structure.m}")
    bit = 1 << (i - 1)
    return [from_mask(mask) for mask in structure.masks if mask & bit]


@dataclass(frozen=True)
class PrevalenceEstimate:
    estimates: tuple[tuple[frozenset[int], float], ...]
    total_n: int
    floor_applied: bool = False
    raw: tuple[float, ...] = field(default=(), repr=False)

    def as_dict(self) -> dict[frozenset[int], float]:
        return dict(self.estimates)

    def to_structure(self, m: int | None = None) -> PopulationStructure:
        return make_structure([(tuple(s), pi) for s, pi in self.estimates], m=m)


def _apply_floor(values: list[float], pi_min: float) -> tuple[list[float], bool]:
    """Raise entries below ``pi_min`` to it and rescale the rest to keep the sum at 1."""
    k = len(values)
    if pi_min * k > 1.0:
        raise ValidationError(f"pi_min={pi_min} too large for {k} strata")
    floored = [False] * k
    changed = True
    applied = False
    out = list(values)
    while changed:
        changed = False
        free_mass = 1.0 - pi_min * sum(floored)
        free_total = sum(v for v, f in zip(values, floored) if not f)
        for j in range(k):
            if floored[j]:
                out[j] = pi_min
            else:
                out[j] = values[j] * free_mass / free_total if free_total > 0 else 0.0
        for j in range(k):
            if not floored[j] and out[j] < pi_min:
                floored[j] = True
                changed = True
                applied = True
    return out, applied


def prevalence_mle(counts: Sequence[tuple[Iterable[int] | int, int]],
                   pi_min: float | None = None) -> PrevalenceEstimate:
    """Multinomial MLE ``n_J / N`` of the stratum prevalences.

    With ``pi_min`` every listed stratum whose estimate falls below the floor
    is set to ``pi_min`` and the remaining estimates are rescaled so the total
    stays one.
    """
    masks, ns = [], []
    for subset, n in counts:
        n = int(n)
        if n < 0:
            raise ValidationError("counts must be non-negative")
        mask = to_mask(subset)
        if mask in masks:
            raise ValidationError(f"duplicate stratum {sorted(from_mask(mask))}")
        masks.append(mask)
        ns.append(n)
    total = sum(ns)
    if total <= 0:
        raise ValidationError("total count must be positive")
    raw = [n / total for n in ns]
    values, applied = raw, False
    if pi_min is not None:
        if not 0.0 < pi_min < 1.0:
            raise ValidationError("pi_min must lie in (0, 1)")
        values, applied = _apply_floor(raw, float(pi_min))
    order = sorted(range(len(masks)), key=lambda j: masks[j])
    estimates = tuple((from_mask(masks[j]), values[j]) for j in order)
    return PrevalenceEstimate(estimates, total, applied, tuple(raw[j] for j in order))
