"""Entropy analysis of detection sets.

Three quantities, all in nats:

- weighted entropy of a detection set, where each object's contribution is
  scaled by its isolation weight (see ``geometry.iou_weights``);
- global entropy of an explicit joint label/relation distribution;
- the information gain between the two.

The joint distribution is supplied as an explicit table: nothing in this
module estimates probabilities from model output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .geometry import iou_weights
from .model import BoundingBox

# Probabilities below this are treated as exact zeros (0 log 0 = 0).
_ZERO_EPS = 1e-12
_SUM_TOL = 1e-9


def _plogp(p: float) -> float:
    if p < _ZERO_EPS:
        return 0.0
    return p * math.log(p)


@dataclass(frozen=True)
class RelationEntry:
    i: int
    j: int
    label: str
    relation: str
    p: float


@dataclass(frozen=True)
class RelationTable:
    """Explicit joint distribution over (object, relation) pairs."""

    entries: tuple[RelationEntry, ...]
    n: int

    def __post_init__(self):
        total = 0.0
        for e in self.entries:
            if e.p < 0:
                raise ValidationError(f"negative probability {e.p} in relation table")
            if not (0 <= e.i < self.n and 0 <= e.j < self.n):
                raise ValidationError(f"relation indices ({e.i}, {e.j}) out of range for n={self.n}")
            if e.i == e.j:
                raise ValidationError(f"self-relation at index {e.i}")
            total += e.p
        if abs(total - 1.0) > _SUM_TOL:
            raise ValidationError(f"relation probabilities sum to {total!r}, not 1")

    @classmethod
    def from_entries(cls, entries, n: int | None = None) -> "RelationTable":
        parsed = tuple(
            RelationEntry(int(e["i"]), int(e["j"]), str(e["label"]), str(e["relation"]), float(e["p"]))
            for e in entries
        )
        if n is None:
            n = 1 + max((max(e.i, e.j) for e in parsed), default=-1)
        return cls(parsed, n)

    @classmethod
    def load(cls, path) -> "RelationTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValidationError(f"{path}: a relation table file must be a JSON array")
        return cls.from_entries(data)

    def dump(self, path) -> None:
        data = [
            {"i": e.i, "j": e.j, "label": e.label, "relation": e.relation, "p": e.p}
            for e in self.entries
        ]
        Path(path).write_text(json.dumps(data), encoding="utf-8")


def weighted_entropy(probs: list[float], boxes: list[BoundingBox]) -> float:
    """H = -sum_i (p_i * w_i) log p_i, with w_i the isolation weights.

    With all boxes pairwise disjoint this reduces exactly to the plain
    per-object entropy sum.
    """
    if len(probs) != len(boxes):
        raise ValidationError(f"{len(probs)} probabilities for {len(boxes)} boxes")
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"probability {p} outside [0, 1]")
    weights = iou_weights(boxes) if boxes else []
    return -sum(w * _plogp(p) for p, w in zip(probs, weights)) + 0.0


def global_entropy(table: RelationTable) -> float:
    """H = -sum over table entries of p log p."""
    return -sum(_plogp(e.p) for e in table.entries) + 0.0


def information_gain(hw: float, hyr: float) -> float:
    """Difference of the two entropies. Negative values are representable."""
    if not (math.isfinite(hw) and math.isfinite(hyr)):
        raise ValidationError("entropies must be finite")
    if hw < 0 or hyr < 0:
        raise ValidationError("entropies must be non-negative")
    return hw - hyr
