"""Domain types: boxes, detections, categories, ground truth, scenes.

Boxes are kept in corner form (x1, y1, x2, y2) internally; the COCO
[x, y, w, h] form exists only at the file boundary (see ``coco_io``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ValidationError

# Pipeline stages a detection can pass through, in order.
STAGE_DETECT = "detect"
STAGE_REVIEW = "review"
STAGE_CORRECT = "correct"
STAGE_EXPORT = "export"
STAGES = (STAGE_DETECT, STAGE_REVIEW, STAGE_CORRECT, STAGE_EXPORT)

# Detection ids are image-scoped so that parallel workers assign the same
# ids regardless of processing order: det_id = image_id * stride + index.
DET_ID_STRIDE = 10_000_000


def make_det_id(image_id: int, index: int) -> int:
    if not 0 <= index < DET_ID_STRIDE:
        raise ValidationError(f"detection index {index} out of range for image {image_id}")
    return image_id * DET_ID_STRIDE + index


def normalize_label(label: str) -> str:
    """Canonical form used whenever two labels are compared for equality."""
    return label.strip().casefold()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, origin at the image top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValidationError(f"non-finite box coordinate: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Clamp to [0, width] x [0, height]."""
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh, *, lenient: bool = False) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        if (w < 0 or h < 0) and lenient:
            w, h = max(w, 0.0), max(h, 0.0)
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    in_vocabulary: bool = True


class CategoryMap:
    """Bidirectional id <-> name mapping with a scoring-vocabulary flag.

    Names are compared trimmed and case-insensitively; the stored spelling
    is the one supplied first.
    """

    def __init__(self, categories: list[Category] | None = None):
        self._by_id: dict[int, Category] = {}
        self._by_key: dict[str, Category] = {}
        for cat in categories or []:
            self.add(cat)

    def add(self, cat: Category) -> None:
        key = normalize_label(cat.name)
        if cat.id in self._by_id:
            raise ValidationError(f"duplicate category id {cat.id}")
        if key in self._by_key:
            raise ValidationError(f"duplicate category name {cat.name!r}")
        self._by_id[cat.id] = cat
        self._by_key[key] = cat

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, category_id: int) -> bool:
        return category_id in self._by_id

    def name_for_id(self, category_id: int) -> str:
        return self._by_id[category_id].name

    def id_for_name(self, name: str) -> int | None:
        cat = self._by_key.get(normalize_label(name))
        return cat.id if cat else None

    def in_vocabulary(self, name: str) -> bool:
        cat = self._by_key.get(normalize_label(name))
        return bool(cat and cat.in_vocabulary)

    def vocabulary_names(self) -> list[str]:
        """Scoring-vocabulary names, ordered by category id for determinism."""
        return [c.name for c in sorted(self._by_id.values(), key=lambda c: c.id) if c.in_vocabulary]

    def restrict_vocabulary(self, names) -> None:
        """Keep only the named categories in the scoring vocabulary."""
        allowed = {normalize_label(n) for n in names}
        for key, cat in list(self._by_key.items()):
            flag = key in allowed
            if cat.in_vocabulary != flag:
                updated = replace(cat, in_vocabulary=flag)
                self._by_key[key] = updated
                self._by_id[cat.id] = updated

    def categories(self) -> list[Category]:
        return sorted(self._by_id.values(), key=lambda c: c.id)


@dataclass(frozen=True)
class StageEvent:
    stage: str
    note: str
    agent: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")


@dataclass(frozen=True)
class Detection:
    """One predicted object. Immutable; label changes produce a new instance."""

    det_id: int
    image_id: int
    box: BoundingBox
    label: str
    score: float
    stage_history: tuple[StageEvent, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1] for detection {self.det_id}")
        if self.stage_history and self.stage_history[0].stage != STAGE_DETECT:
            raise ValidationError("stage history must begin with the detect stage")

    def with_event(self, event: StageEvent) -> "Detection":
        return replace(self, stage_history=self.stage_history + (event,))

    def relabeled(self, label: str, score: float | None, event: StageEvent) -> "Detection":
        return replace(
            self,
            label=label,
            score=self.score if score is None else score,
            stage_history=self.stage_history + (event,),
        )


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: int
    box: BoundingBox
    category_id: int
    iscrowd: bool = False
    area: float = 0.0

    @classmethod
    def build(cls, image_id, box, category_id, iscrowd=False, area=None, *, lenient=False):
        if area is None:
            area = box.area
        if area <= 0 and not lenient:
            raise ValidationError(
                f"ground-truth object on image {image_id} has non-positive area {area}"
            )
        return cls(image_id, box, category_id, bool(iscrowd), float(area))


@dataclass
class SceneRecord:
    """One image's worth of pipeline state: truth, detections, verdicts, fixes.

    Mutable; owned by exactly one pipeline worker at a time.
    """

    image_id: int
    width: float
    height: float
    image_ref: str | None = None
    ground_truth: list[GroundTruthObject] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)
    caption: str | None = None
    verdicts: list = field(default_factory=list)
    corrected: list[Detection] = field(default_factory=list)
    # det ids removed by the uncorrectable-detection "drop" policy; the
    # corrected list still carries them so det-id sets stay stable.
    dropped_ids: set[int] = field(default_factory=set)

    def attach_detections(self, detections: list[Detection]) -> None:
        """Install raw detections, clamping boxes to the image bounds."""
        clamped = []
        for det in detections:
            if det.image_id != self.image_id:
                raise ValidationError(
                    f"detection {det.det_id} belongs to image {det.image_id}, "
                    f"not {self.image_id}"
                )
            clamped.append(replace(det, box=det.box.clamped(self.width, self.height)))
        self.detections = clamped

    def final_detections(self) -> list[Detection]:
        return self.corrected if self.corrected else self.detections
