"""Box geometry: intersection-over-union and overlap-based weights."""

from __future__ import annotations

from .errors import EmptyInputError
from .model import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def crowd_overlap(det: BoundingBox, crowd: BoundingBox) -> float:
    """Intersection over the detection's own area, for crowd regions."""
    ix = min(det.x2, crowd.x2) - max(det.x1, crowd.x1)
    iy = min(det.y2, crowd.y2) - max(det.y1, crowd.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    if det.area <= 0.0:
        return 0.0
    return inter / det.area


def iou_weights(boxes: list[BoundingBox]) -> list[float]:
    """Per-box isolation weights: w_i = 1 / (1 + sum_{j != i} IoU(b_i, b_j)).

    A box disjoint from all others gets weight exactly 1; heavy mutual
    overlap pushes the weight toward 0.
    """
    if not boxes:
        raise EmptyInputError("iou_weights requires at least one box")
    n = len(boxes)
    totals = [0.0] * n
    for i in range(n):
        for j in range(i + 1, n):
            v = iou(boxes[i], boxes[j])
            totals[i] += v
            totals[j] += v
    return [1.0 / (1.0 + t) for t in totals]
