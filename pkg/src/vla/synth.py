"""Synthetic scene generation for desk-scale experiments.

Produces matched COCO-format annotation and results documents: ground
truth sampled under a chosen overlap regime, plus a "perfect" detection
set (one detection per object, correct label, score 1.0). Boxes use
integer pixel corners so downstream integer rendering is lossless.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import InfeasibleSpecError, ValidationError
from .geometry import iou
from .model import BoundingBox

REGIME_DISJOINT = "disjoint"
REGIME_CLUSTERED = "clustered"
REGIME_MIXED = "mixed"
REGIMES = (REGIME_DISJOINT, REGIME_CLUSTERED, REGIME_MIXED)

_MAX_ATTEMPTS = 10_000
_MIN_SIDE = 8
_CLUSTER_MIN_IOU = 0.3


@dataclass(frozen=True)
class SynthSpec:
    image_count: int
    image_size: tuple[int, int] = (640, 480)
    objects_per_image: tuple[int, int] = (3, 8)
    overlap: str = REGIME_MIXED
    category_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_count < 1:
            raise ValidationError("image_count must be >= 1")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValidationError("objects_per_image range must satisfy 1 <= lo <= hi")
        if self.category_count < 2:
            raise ValidationError("category_count must be >= 2")
        if self.overlap not in REGIMES:
            raise ValidationError(f"unknown overlap regime {self.overlap!r}")
        w, h = self.image_size
        if w < 4 * _MIN_SIDE or h < 4 * _MIN_SIDE:
            raise ValidationError("image too small to place objects")


def _sample_box(rng: random.Random, width: int, height: int) -> BoundingBox:
    # Mix size classes so every area stratum occurs when the image allows it.
    classes = ["small"]
    if width >= 40 and height >= 40:
        classes.append("medium")
    if width >= 110 and height >= 110:
        classes.append("large")
    size_class = rng.choice(classes)
    if size_class == "small":
        w = rng.randint(_MIN_SIDE, 31)
        h = rng.randint(_MIN_SIDE, min(31, 1023 // w))
    elif size_class == "medium":
        w = rng.randint(32, min(90, width - 2))
        h = rng.randint(max(_MIN_SIDE, 1024 // w + 1), min(height - 2, 9216 // w))
    else:
        w = rng.randint(97, min(200, width - 2))
        h = rng.randint(9216 // w + 1, min(height - 2, 220))
    x = rng.randint(0, width - w)
    y = rng.randint(0, height - h)
    return BoundingBox(float(x), float(y), float(x + w), float(y + h))


def _place_disjoint(rng, width, height, count) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    for _ in range(count):
        for attempt in range(_MAX_ATTEMPTS):
            cand = _sample_box(rng, width, height)
            if all(iou(cand, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise InfeasibleSpecError(
                f"could not place {count} disjoint boxes in {width}x{height}"
            )
    return boxes


def _place_clustered(rng, width, height, count) -> list[BoundingBox]:
    anchor = _sample_box(rng, width, height)
    boxes = [anchor]
    for _ in range(count - 1):
        for attempt in range(_MAX_ATTEMPTS):
            dx = rng.randint(2, max(3, int(anchor.width // 2)))
            dy = rng.randint(0, max(1, int(anchor.height // 3)))
            if rng.random() < 0.5:
                dx = -dx
            if rng.random() < 0.5:
                dy = -dy
            x1 = min(max(anchor.x1 + dx, 0.0), width - anchor.width)
            y1 = min(max(anchor.y1 + dy, 0.0), height - anchor.height)
            cand = BoundingBox(x1, y1, x1 + anchor.width, y1 + anchor.height)
            distinct = all(
                (cand.x1, cand.y1, cand.x2, cand.y2) != (b.x1, b.y1, b.x2, b.y2) for b in boxes
            )
            if distinct and iou(cand, anchor) >= _CLUSTER_MIN_IOU:
                boxes.append(cand)
                break
        else:
            raise InfeasibleSpecError("could not place a clustered box")
    return boxes


def generate(spec: SynthSpec) -> tuple[dict, list[dict]]:
    """Build (annotation document, perfect results array) from a SynthSpec."""
    rng = random.Random(spec.seed)
    width, height = spec.image_size

    categories = [
        {"id": k + 1, "name": f"class_{k:02d}"} for k in range(spec.category_count)
    ]
    images = []
    annotations = []
    results = []
    ann_id = 0
    for i in range(spec.image_count):
        image_id = i + 1
        images.append(
            {
                "id": image_id,
                "width": width,
                "height": height,
                "file_name": f"synth_{image_id:06d}.jpg",
            }
        )
        count = rng.randint(*spec.objects_per_image)
        regime = spec.overlap
        if regime == REGIME_MIXED:
            regime = REGIME_DISJOINT if image_id % 2 == 0 else REGIME_CLUSTERED
        if regime == REGIME_DISJOINT:
            boxes = _place_disjoint(rng, width, height, count)
        else:
            boxes = _place_clustered(rng, width, height, count)
        for box in boxes:
            ann_id += 1
            category_id = rng.randint(1, spec.category_count)
            xywh = box.as_xywh()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": category_id,
                    "bbox": xywh,
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            results.append(
                {
                    "image_id": image_id,
                    "category_id": category_id,
                    "bbox": xywh,
                    "score": 1.0,
                }
            )

    document = {"images": images, "annotations": annotations, "categories": categories}
    return document, results


def write_synth(spec: SynthSpec, annotations_path, results_path) -> tuple[dict, list[dict]]:
    document, results = generate(spec)
    Path(annotations_path).write_text(json.dumps(document), encoding="utf-8")
    Path(results_path).write_text(json.dumps(results), encoding="utf-8")
    return document, results
