"""COCO-format boundary: annotation/results readers and the results writer.

Strict mode (the default) refuses structurally suspect input; lenient mode
logs, skips, and keeps going. Either way the number of parsed objects is
never silently changed: every skip is logged.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .errors import ParseError, ReferentialIntegrityError, ValidationError
from .model import (
    STAGE_DETECT,
    STAGE_EXPORT,
    BoundingBox,
    Category,
    CategoryMap,
    Detection,
    GroundTruthObject,
    SceneRecord,
    StageEvent,
    make_det_id,
)

log = logging.getLogger(__name__)


def _load_json(path) -> object:
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8", byte_offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        offset = len(exc.doc[: exc.pos].encode("utf-8"))
        raise ParseError(f"{path}: {exc.msg}", byte_offset=offset) from exc


def load_coco_annotations(
    path, *, strict: bool = True
) -> tuple[CategoryMap, list[SceneRecord]]:
    """Read a COCO annotation file into a CategoryMap and scene skeletons.

    Ground-truth boxes are converted from [x, y, w, h] to corner form.
    Categories present in the file form the scoring vocabulary.
    """
    data = _load_json(path)
    if not isinstance(data, dict) or not {"images", "annotations", "categories"} <= set(data):
        raise ParseError(f"{path}: not a COCO annotation file (missing top-level arrays)")

    cats = CategoryMap(
        [Category(int(c["id"]), str(c["name"]), in_vocabulary=True) for c in data["categories"]]
    )

    scenes: dict[int, SceneRecord] = {}
    for img in data["images"]:
        image_id = int(img["id"])
        if image_id in scenes:
            raise ReferentialIntegrityError(f"{path}: duplicate image id {image_id}")
        scenes[image_id] = SceneRecord(
            image_id=image_id,
            width=float(img.get("width", 0) or 0),
            height=float(img.get("height", 0) or 0),
            image_ref=img.get("file_name"),
        )

    for ann in data["annotations"]:
        ann_id = ann.get("id")
        category_id = int(ann["category_id"])
        image_id = int(ann["image_id"])
        if category_id not in cats:
            raise ReferentialIntegrityError(
                f"{path}: annotation {ann_id} references unknown category id {category_id}"
            )
        if image_id not in scenes:
            raise ReferentialIntegrityError(
                f"{path}: annotation {ann_id} references unknown image id {image_id}"
            )
        try:
            box = BoundingBox.from_xywh(ann["bbox"], lenient=not strict)
            gt = GroundTruthObject.build(
                image_id,
                box,
                category_id,
                iscrowd=ann.get("iscrowd", 0),
                area=ann.get("area"),
                lenient=not strict,
            )
        except ValidationError:
            if strict:
                raise
            log.warning("skipping degenerate annotation %s on image %s", ann_id, image_id)
            continue
        scenes[image_id].ground_truth.append(gt)

    return cats, [scenes[i] for i in sorted(scenes)]


def detections_from_entries(
    image_id: int,
    entries: list[dict],
    cats: CategoryMap,
    *,
    agent: str = "detector",
) -> list[Detection]:
    """Convert wire-format result entries for one image into Detections.

    Ids are image-scoped (entry order within the image), so the assignment
    does not depend on which other images were processed first.
    """
    dets = []
    for k, entry in enumerate(entries):
        category_id = int(entry["category_id"])
        if category_id not in cats:
            raise ValidationError(f"result entry references unknown category id {category_id}")
        score = float(entry["score"])
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"result score {score} outside [0, 1] on image {image_id}")
        label = cats.name_for_id(category_id)
        dets.append(
            Detection(
                det_id=make_det_id(image_id, k),
                image_id=image_id,
                box=BoundingBox.from_xywh(entry["bbox"]),
                label=label,
                score=score,
                stage_history=(StageEvent(STAGE_DETECT, label, agent),),
            )
        )
    return dets


def load_coco_results(
    path,
    cats: CategoryMap,
    *,
    known_image_ids: set[int] | None = None,
    strict: bool = True,
) -> list[Detection]:
    """Read a COCO results array into Detections with fresh det ids."""
    data = _load_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: a COCO results file must be a JSON array")

    by_image: dict[int, list[dict]] = {}
    skipped = 0
    for entry in data:
        image_id = int(entry["image_id"])
        if known_image_ids is not None and image_id not in known_image_ids:
            if strict:
                raise ReferentialIntegrityError(
                    f"{path}: result references unknown image id {image_id}"
                )
            log.warning("skipping result for unknown image id %s", image_id)
            skipped += 1
            continue
        by_image.setdefault(image_id, []).append(entry)
    if skipped:
        log.warning("skipped %d results for unknown images", skipped)

    dets: list[Detection] = []
    for image_id in sorted(by_image):
        dets.extend(detections_from_entries(image_id, by_image[image_id], cats))
    return dets


def exportable(det: Detection, cats: CategoryMap, scene: SceneRecord) -> bool:
    if det.det_id in scene.dropped_ids:
        return False
    return cats.in_vocabulary(det.label)


def write_coco_results(scenes: list[SceneRecord], path, cats: CategoryMap) -> dict[str, int]:
    """Write final detections as a COCO results array.

    Detections whose final label is outside the scoring vocabulary (and
    detections dropped by policy) are excluded from the file; the returned
    stats count them so the run summary can report the exclusions.
    """
    entries = []
    written = excluded = dropped = 0
    for scene in sorted(scenes, key=lambda s: s.image_id):
        finals = []
        for det in scene.final_detections():
            if det.det_id in scene.dropped_ids:
                dropped += 1
                finals.append(det)
                continue
            if not cats.in_vocabulary(det.label):
                excluded += 1
                finals.append(det.with_event(StageEvent(STAGE_EXPORT, "excluded", "exporter")))
                continue
            written += 1
            finals.append(det.with_event(StageEvent(STAGE_EXPORT, "written", "exporter")))
            entries.append(
                {
                    "image_id": scene.image_id,
                    "category_id": cats.id_for_name(det.label),
                    "bbox": det.box.as_xywh(),
                    "score": det.score,
                }
            )
        if scene.corrected:
            scene.corrected = finals
        else:
            scene.detections = finals
    Path(path).write_text(json.dumps(entries), encoding="utf-8")
    return {"written": written, "excluded": excluded, "dropped": dropped}
