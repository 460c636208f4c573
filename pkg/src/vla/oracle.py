"""Ground-truth oracle agents with tunable error rates.

These stand in for the linguistic and classification agents so the whole
pipeline can run and be tested without any model. All randomness is
counter-based: a pure function of (seed, image id, det id, stage), so
outcomes do not depend on execution order or worker count.

``oracle_linguistic_script`` and ``oracle_classifier_script`` adapt the
oracles to the gateway's mock transport by parsing the actual prompt and
request bodies; the ``serve-mock`` HTTP server reuses the same scripts, so
the in-process and HTTP paths share one implementation.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import OracleUnavailableError, ProtocolError, ValidationError
from .geometry import iou
from .model import (
    DET_ID_STRIDE,
    BoundingBox,
    CategoryMap,
    Detection,
    GroundTruthObject,
    SceneRecord,
    normalize_label,
)
from .protocol import (
    JUDGMENT_REASONABLE,
    JUDGMENT_UNREASONABLE,
    MODE_STRUCTURED,
    Verdict,
    render_structured_verdicts,
)

UNKNOWN_LABEL = "unknown"


@dataclass(frozen=True)
class OracleConfig:
    seed: int
    match_iou_threshold: float = 0.5
    flag_accuracy: float = 1.0        # P(true label error gets flagged)
    false_flag_rate: float = 0.0      # P(correct detection gets flagged)
    classifier_accuracy: float = 1.0  # P(classifier returns the true label)

    def __post_init__(self):
        for name in ("flag_accuracy", "false_flag_rate", "classifier_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.match_iou_threshold <= 1.0:
            raise ValidationError("match_iou_threshold must be in (0, 1]")


def unit_uniform(*key_parts) -> float:
    """Uniform in [0, 1), a pure function of the key."""
    digest = hashlib.sha256(":".join(str(p) for p in key_parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def best_gt_match(
    scene: SceneRecord, box: BoundingBox, threshold: float
) -> GroundTruthObject | None:
    """The non-crowd ground-truth object of highest IoU >= threshold."""
    best, best_iou = None, -1.0
    for gt in scene.ground_truth:
        if gt.iscrowd:
            continue
        v = iou(box, gt.box)
        if v >= threshold and v > best_iou:
            best, best_iou = gt, v
    return best


# -- review oracle ---------------------------------------------------------


def _review_one(
    scene: SceneRecord,
    cats: CategoryMap,
    det_id: int,
    label: str,
    box: BoundingBox,
    cfg: OracleConfig,
) -> Verdict:
    gt = best_gt_match(scene, box, cfg.match_iou_threshold)
    truth = cats.name_for_id(gt.category_id) if gt else None
    is_error = truth is None or normalize_label(label) != normalize_label(truth)
    u = unit_uniform(cfg.seed, scene.image_id, det_id, "review")
    flagged = u < (cfg.flag_accuracy if is_error else cfg.false_flag_rate)
    if not flagged:
        return Verdict(det_id=det_id, judgment=JUDGMENT_REASONABLE)
    suspected = truth if (is_error and truth is not None) else None
    rationale = (
        f"the object is likely the {suspected}" if suspected else "no plausible match in context"
    )
    return Verdict(
        det_id=det_id,
        judgment=JUDGMENT_UNREASONABLE,
        suspected_label=suspected,
        rationale=rationale,
    )


def oracle_review(scene: SceneRecord, cats: CategoryMap, cfg: OracleConfig) -> list[Verdict]:
    """Judge each raw detection against ground truth with error rates applied."""
    if not scene.ground_truth and scene.detections:
        raise OracleUnavailableError(f"scene {scene.image_id} has no ground truth")
    return [
        _review_one(scene, cats, det.det_id, det.label, det.box, cfg)
        for det in scene.detections
    ]


# -- classification oracle -------------------------------------------------


def _classify_region(
    scene: SceneRecord,
    cats: CategoryMap,
    det_id: int,
    box: BoundingBox,
    candidates: list[str],
    cfg: OracleConfig,
) -> tuple[str, float]:
    gt = best_gt_match(scene, box, cfg.match_iou_threshold)
    if gt is None:
        return UNKNOWN_LABEL, 0.0
    truth = cats.name_for_id(gt.category_id)
    truth_spelled = next(
        (c for c in candidates if normalize_label(c) == normalize_label(truth)), None
    )
    wrong = [c for c in candidates if normalize_label(c) != normalize_label(truth)]
    u = unit_uniform(cfg.seed, scene.image_id, det_id, "classify")
    if truth_spelled is not None and (u < cfg.classifier_accuracy or not wrong):
        return truth_spelled, 1.0
    if not wrong:
        return UNKNOWN_LABEL, 0.0
    pick = int(unit_uniform(cfg.seed, scene.image_id, det_id, "classify-wrong") * len(wrong))
    return wrong[min(pick, len(wrong) - 1)], 0.5


def oracle_classify(
    scene: SceneRecord,
    det: Detection,
    candidates: list[str],
    cats: CategoryMap,
    cfg: OracleConfig,
) -> tuple[str, float]:
    """True label with probability gamma, else a uniformly-chosen wrong one."""
    return _classify_region(scene, cats, det.det_id, det.box, list(candidates), cfg)


# -- label-noise injection ---------------------------------------------------


def inject_label_noise(
    scenes: list[SceneRecord], rate: float, seed: int, cats: CategoryMap
) -> list[dict]:
    """Corrupt correctly-labeled detections with probability ``rate``.

    Returns the error manifest: one record per corruption. Scenes are
    modified in place; labels change, boxes never do.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"noise rate must be in [0, 1], got {rate}")
    vocab = cats.vocabulary_names()
    if len(vocab) < 2:
        raise ValidationError("need at least two vocabulary labels to inject noise")
    manifest: list[dict] = []
    for scene in scenes:
        new_dets = []
        for det in scene.detections:
            gt = best_gt_match(scene, det.box, 0.5)
            correct = gt is not None and normalize_label(det.label) == normalize_label(
                cats.name_for_id(gt.category_id)
            )
            if correct and unit_uniform(seed, scene.image_id, det.det_id, "noise") < rate:
                others = [v for v in vocab if normalize_label(v) != normalize_label(det.label)]
                pick = int(
                    unit_uniform(seed, scene.image_id, det.det_id, "noise-label") * len(others)
                )
                new_label = others[min(pick, len(others) - 1)]
                manifest.append(
                    {
                        "image_id": scene.image_id,
                        "det_id": det.det_id,
                        "old": det.label,
                        "new": new_label,
                    }
                )
                new_dets.append(replace(det, label=new_label))
            else:
                new_dets.append(det)
        scene.detections = new_dets
    return manifest


def write_manifest(manifest: list[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in manifest:
            fh.write(json.dumps(item) + "\n")


# -- gateway script adapters -------------------------------------------------

_CAPTION_REQ_RE = re.compile(r"image id (\d+)")
_CAPTION_ID_RE = re.compile(r"\(image (\d+)\)")
_DET_LINE_RE = re.compile(
    r"^- (.+), coordinates: \((-?\d+), (-?\d+)\), \((-?\d+), (-?\d+)\)"
    r"(?:, confidence: [0-9.]+)?$",
    re.MULTILINE,
)
_ID_LIST_RE = re.compile(r"(\d+) \([^)]*\)")


def oracle_caption(scene: SceneRecord, cats: CategoryMap) -> str:
    """Deterministic caption that names the ground-truth objects.

    The trailing ``(image N)`` marker is how the review oracle recovers
    which scene a later prompt refers to, mirroring how a real agent would
    rely on the image itself.
    """
    names = sorted({cats.name_for_id(gt.category_id) for gt in scene.ground_truth})
    subject = ", ".join(names) if names else "no salient objects"
    return f"The image shows {subject} (image {scene.image_id})."


def oracle_linguistic_script(
    scenes_by_id: dict[int, SceneRecord],
    cats: CategoryMap,
    cfg: OracleConfig,
    mode: str = MODE_STRUCTURED,
):
    """A mock chat script answering caption requests and review prompts."""

    def respond(message: str) -> str:
        if "coordinates:" not in message:
            m = _CAPTION_REQ_RE.search(message)
            if not m:
                raise OracleUnavailableError("caption request does not name an image id")
            scene = scenes_by_id.get(int(m.group(1)))
            if scene is None:
                raise OracleUnavailableError(f"no ground truth for image {m.group(1)}")
            return oracle_caption(scene, cats)

        m = _CAPTION_ID_RE.search(message)
        if not m:
            raise OracleUnavailableError("review prompt caption does not carry an image marker")
        image_id = int(m.group(1))
        scene = scenes_by_id.get(image_id)
        if scene is None:
            raise OracleUnavailableError(f"no ground truth for image {image_id}")

        lines = _DET_LINE_RE.findall(message)
        ids = [int(v) for v in _ID_LIST_RE.findall(message.rsplit("\n", 1)[-1])]
        if len(ids) != len(lines):
            # free-text prompts carry no ids; reconstruct the canonical ones
            ids = [image_id * DET_ID_STRIDE + k for k in range(len(lines))]

        verdicts = []
        for det_id, (label, x1, y1, x2, y2) in zip(ids, lines):
            box = BoundingBox(float(x1), float(y1), float(x2), float(y2))
            verdicts.append(_review_one(scene, cats, det_id, label, box, cfg))

        if mode == MODE_STRUCTURED:
            return render_structured_verdicts(verdicts)
        sentences = []
        for verdict, (label, *_rest) in zip(verdicts, lines):
            if verdict.judgment == JUDGMENT_REASONABLE:
                sentences.append(f"{label} detection is reasonable.")
            elif verdict.suspected_label:
                sentences.append(
                    f"{label} detection is unreasonable, as the object is likely "
                    f"the {verdict.suspected_label}."
                )
            else:
                sentences.append(f"{label} detection is unreasonable.")
        return " ".join(sentences)

    return respond


def oracle_classifier_script(
    scenes_by_id: dict[int, SceneRecord], cats: CategoryMap, cfg: OracleConfig
):
    """A mock classify script serving the /classify wire shape."""

    def respond(wire: dict) -> dict:
        try:
            image_id = int(wire["image_id"])
            det_id = int(wire["det_id"])
            x1, y1, x2, y2 = (float(v) for v in wire["region"])
            candidates = [str(c) for c in wire["candidates"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed classify request: {wire!r}") from exc
        scene = scenes_by_id.get(image_id)
        if scene is None:
            raise OracleUnavailableError(f"no ground truth for image {image_id}")
        label, confidence = _classify_region(
            scene, cats, det_id, BoundingBox(x1, y1, x2, y2), candidates, cfg
        )
        return {"label": label, "confidence": confidence}

    return respond
