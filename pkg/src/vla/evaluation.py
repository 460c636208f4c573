"""Detection evaluation (COCO protocol) and correction metrics.

Matching protocol, applied per category, per IoU threshold t in
{0.50, 0.55, ..., 0.95}, per area stratum:

- strata on ground-truth area: small < 32^2, medium in [32^2, 96^2],
  large > 96^2, plus "all";
- a ground-truth object is *ignored* in a stratum when it is a crowd
  region or its area falls outside the stratum;
- detections are taken per image, truncated to the top 100 by score
  (score ties broken by det id), then per category sorted the same way;
- each detection greedily takes the available ground truth of highest
  IoU >= t, preferring non-ignored ground truth over ignored regardless
  of IoU (first-best wins on exact IoU ties); crowd regions stay
  available for further matches, and overlap with a crowd region is
  intersection over the detection's own area;
- a detection matched to ignored ground truth is dropped from the
  precision/recall accumulation; an unmatched detection whose own box
  area falls outside the stratum is likewise dropped; remaining
  unmatched detections are false positives;
- AP is the mean of interpolated precision at the 101 recall points
  {0, 0.01, ..., 1.00}, with precision first made monotonically
  non-increasing; AP is undefined for (category, stratum) pairs with no
  scoreable ground truth, and undefined cells are excluded from means.

Correction metrics match original detections to non-crowd ground truth
per image, greedily by descending IoU (>= the configured threshold, each
side used at most once); ED counts matched detections whose original
label disagrees with the ground truth, CD the subset whose final label
agrees. Displayed CR percentages are truncated to one decimal.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import crowd_overlap, iou
from .model import CategoryMap, Detection, SceneRecord, normalize_label

IOU_THRESHOLDS = tuple(0.5 + 0.05 * k for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

_SMALL_MAX = 32.0**2
_MEDIUM_MAX = 96.0**2

AREA_STRATA = {
    "all": (0.0, float("inf")),
    "small": (0.0, _SMALL_MAX),
    "medium": (_SMALL_MAX, _MEDIUM_MAX),
    "large": (_MEDIUM_MAX, float("inf")),
}


def _in_stratum(area: float, name: str) -> bool:
    if name == "all":
        return True
    if name == "small":
        return area < _SMALL_MAX
    if name == "medium":
        return _SMALL_MAX <= area <= _MEDIUM_MAX
    return area > _MEDIUM_MAX


@dataclass
class EvalReport:
    ap_50_95: float | None
    ap_50: float | None
    ap_75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_threshold_ap: list = field(default_factory=list)
    per_category_ap: dict = field(default_factory=dict)
    gt_counts: dict = field(default_factory=dict)
    det_counts: dict = field(default_factory=dict)

    def headline(self) -> dict:
        return {
            "ap_50_95": self.ap_50_95,
            "ap_50": self.ap_50,
            "ap_75": self.ap_75,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
        }


@dataclass(frozen=True)
class CorrectionReport:
    ed: int
    cd: int

    def __post_init__(self):
        if not 0 <= self.cd <= self.ed:
            raise ValidationError(f"CD must satisfy 0 <= CD <= ED, got CD={self.cd} ED={self.ed}")

    @property
    def cr(self) -> float | None:
        """Exact correction rate as a percentage; undefined when ED = 0."""
        if self.ed == 0:
            return None
        return 100.0 * self.cd / self.ed

    @property
    def cr_one_decimal(self) -> float | None:
        """CR truncated to one decimal, the table display convention."""
        if self.ed == 0:
            return None
        return (1000 * self.cd // self.ed) / 10.0


def _final_detections(scene: SceneRecord, stage: str) -> list[Detection]:
    if stage == "raw":
        dets = scene.detections
    elif stage == "final":
        dets = scene.final_detections()
    else:
        raise ValidationError(f"unknown evaluation stage {stage!r}")
    if stage == "final":
        dets = [d for d in dets if d.det_id not in scene.dropped_ids]
    return dets


def _truncate_per_image(dets: list[Detection], max_dets: int) -> list[Detection]:
    if len(dets) <= max_dets:
        return dets
    return sorted(dets, key=lambda d: (-d.score, d.det_id))[:max_dets]


def evaluate_coco(
    scenes: list[SceneRecord],
    cats: CategoryMap,
    *,
    stage: str = "final",
    max_dets: int = 100,
) -> EvalReport:
    """Evaluate final detections against ground truth under the protocol above."""
    names = [c.name for c in cats.categories() if c.in_vocabulary]
    ids_by_key = {normalize_label(n): n for n in names}
    strata = list(AREA_STRATA)

    # Per (category, image): detections sorted by (-score, det_id), ground
    # truth in annotation order, and the IoU matrix between them.
    per_cat: dict[str, list[tuple[list, list, np.ndarray]]] = {n: [] for n in names}
    gt_counts = {s: 0 for s in strata}
    det_counts = {s: 0 for s in strata}

    for scene in scenes:
        dets = _truncate_per_image(_final_detections(scene, stage), max_dets)
        for gt in scene.ground_truth:
            if not gt.iscrowd and cats.in_vocabulary(cats.name_for_id(gt.category_id)):
                for s in strata:
                    if _in_stratum(gt.area, s):
                        gt_counts[s] += 1
        for det in dets:
            for s in strata:
                if _in_stratum(det.box.area, s):
                    det_counts[s] += 1
        by_cat_d: dict[str, list[Detection]] = {}
        for det in dets:
            key = normalize_label(det.label)
            if key in ids_by_key:
                by_cat_d.setdefault(ids_by_key[key], []).append(det)
        by_cat_g: dict[str, list] = {}
        for gt in scene.ground_truth:
            name = cats.name_for_id(gt.category_id)
            if normalize_label(name) in ids_by_key:
                by_cat_g.setdefault(name, []).append(gt)
        for name in set(by_cat_d) | set(by_cat_g):
            d = sorted(by_cat_d.get(name, []), key=lambda x: (-x.score, x.det_id))
            g = by_cat_g.get(name, [])
            m = np.zeros((len(d), len(g)))
            for di, det in enumerate(d):
                for gi, gt in enumerate(g):
                    m[di, gi] = (
                        crowd_overlap(det.box, gt.box) if gt.iscrowd else iou(det.box, gt.box)
                    )
            per_cat[name].append((d, g, m))

    # ap[(cat, t_idx, stratum)] -> float | None
    ap: dict[tuple[str, int, str], float | None] = {}
    for name in names:
        chunks = per_cat[name]
        for s in strata:
            n_gt = sum(
                1 for _, g, _ in chunks for gt in g if not gt.iscrowd and _in_stratum(gt.area, s)
            )
            if n_gt == 0:
                for ti in range(len(IOU_THRESHOLDS)):
                    ap[(name, ti, s)] = None
                continue
            for ti, t in enumerate(IOU_THRESHOLDS):
                rows = []  # (score, det_id, is_tp) for counted detections
                for d, g, m in chunks:
                    gt_ignored = [gt.iscrowd or not _in_stratum(gt.area, s) for gt in g]
                    order = [gi for gi in range(len(g)) if not gt_ignored[gi]] + [
                        gi for gi in range(len(g)) if gt_ignored[gi]
                    ]
                    taken = [False] * len(g)
                    for di, det in enumerate(d):
                        best, best_iou = -1, 0.0
                        for gi in order:
                            if taken[gi] and not g[gi].iscrowd:
                                continue
                            if best >= 0 and not gt_ignored[best] and gt_ignored[gi]:
                                break
                            v = m[di, gi]
                            if v < t:
                                continue
                            if best < 0 or v > best_iou:
                                best, best_iou = gi, v
                        if best >= 0:
                            if gt_ignored[best]:
                                continue  # absorbed by an ignored region
                            taken[best] = True
                            rows.append((det.score, det.det_id, True))
                        else:
                            if not _in_stratum(det.box.area, s):
                                continue  # out-of-stratum false positive: ignored
                            rows.append((det.score, det.det_id, False))
                ap[(name, ti, s)] = _average_precision(rows, n_gt)

    def mean_over(values: list) -> float | None:
        defined = [v for v in values if v is not None]
        return sum(defined) / len(defined) if defined else None

    per_threshold = [
        mean_over([ap[(n, ti, "all")] for n in names]) for ti in range(len(IOU_THRESHOLDS))
    ]
    per_category = {n: mean_over([ap[(n, ti, "all")] for ti in range(10)]) for n in names}

    def stratum_mean(s: str) -> float | None:
        return mean_over([ap[(n, ti, s)] for n in names for ti in range(len(IOU_THRESHOLDS))])

    return EvalReport(
        ap_50_95=mean_over(per_threshold),
        ap_50=per_threshold[0],
        ap_75=per_threshold[5],
        ap_small=stratum_mean("small"),
        ap_medium=stratum_mean("medium"),
        ap_large=stratum_mean("large"),
        per_threshold_ap=per_threshold,
        per_category_ap=per_category,
        gt_counts=gt_counts,
        det_counts=det_counts,
    )


def _average_precision(rows: list[tuple[float, int, bool]], n_gt: int) -> float:
    if n_gt <= 0:
        raise ValidationError("AP undefined without ground truth")
    if not rows:
        return 0.0
    rows.sort(key=lambda r: (-r[0], r[1]))
    tp = np.cumsum([1.0 if r[2] else 0.0 for r in rows])
    fp = np.cumsum([0.0 if r[2] else 1.0 for r in rows])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # enforce monotonically non-increasing precision from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(rows)
    out = np.zeros(len(RECALL_POINTS))
    out[valid] = precision[idx[valid]]
    return float(out.mean())


# -- correction metrics ------------------------------------------------------


def greedy_iou_matching(
    dets: list[Detection], scene: SceneRecord, match_iou: float
) -> list[tuple[Detection, object]]:
    """Exclusive detection/ground-truth pairs, greedily by descending IoU."""
    pairs = []
    gts = [gt for gt in scene.ground_truth if not gt.iscrowd]
    for det in dets:
        for gi, gt in enumerate(gts):
            v = iou(det.box, gt.box)
            if v >= match_iou:
                pairs.append((v, det.det_id, gi, det, gt))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_d: set[int] = set()
    used_g: set[int] = set()
    out = []
    for v, det_id, gi, det, gt in pairs:
        if det_id in used_d or gi in used_g:
            continue
        used_d.add(det_id)
        used_g.add(gi)
        out.append((det, gt))
    return out


def correction_metrics(
    scenes: list[SceneRecord], cats: CategoryMap, match_iou: float = 0.5
) -> CorrectionReport:
    """Count label errors (ED) and corrected labels (CD) across scenes."""
    ed = cd = 0
    for scene in scenes:
        final_by_id = {d.det_id: d for d in scene.final_detections()}
        for det, gt in greedy_iou_matching(scene.detections, scene, match_iou):
            truth = normalize_label(cats.name_for_id(gt.category_id))
            if normalize_label(det.label) == truth:
                continue
            ed += 1
            final = final_by_id.get(det.det_id)
            if final is None or det.det_id in scene.dropped_ids:
                continue
            if normalize_label(final.label) == truth:
                cd += 1
    return CorrectionReport(ed=ed, cd=cd)


# -- report rendering --------------------------------------------------------

_EVAL_COLUMNS = ("ap_50_95", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large")
_UNDEFINED_CELL = "—"


def _pct_cell(value: float | None) -> str:
    return _UNDEFINED_CELL if value is None else f"{100.0 * value:.1f}"


def _cr_cell(corr: CorrectionReport) -> str:
    v = corr.cr_one_decimal
    return _UNDEFINED_CELL if v is None else f"{v:.1f}%"


def render_report(
    eval_report: EvalReport | None,
    corr: CorrectionReport | None,
    fmt: str = "text-table",
) -> str:
    """Render reports as a text table, JSON, or CSV (one-decimal text cells)."""
    if fmt == "text-table":
        lines = []
        if eval_report is not None:
            headers = ("AP_50:95", "AP_50", "AP_75", "AP_s", "AP_m", "AP_l")
            values = [_pct_cell(getattr(eval_report, c)) for c in _EVAL_COLUMNS]
            widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
            lines.append("  ".join(h.rjust(w) for h, w in zip(headers, widths)))
            lines.append("  ".join(v.rjust(w) for v, w in zip(values, widths)))
        if corr is not None:
            lines.append(f"ED {corr.ed}  CD {corr.cd}  CR {_cr_cell(corr)}")
        return "\n".join(lines) + "\n"

    payload: dict = {}
    if eval_report is not None:
        payload.update({c: getattr(eval_report, c) for c in _EVAL_COLUMNS})
    if corr is not None:
        payload.update({"ed": corr.ed, "cd": corr.cd, "cr": corr.cr})

    if fmt == "json":
        return json.dumps(payload, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        keys = list(payload)
        writer.writerow(keys)
        writer.writerow(["" if payload[k] is None else repr(payload[k]) for k in keys])
        return buf.getvalue()
    raise ValidationError(f"unknown report format {fmt!r}")


def parse_rendered(document: str, fmt: str) -> dict:
    """Parse a json/csv rendering back into values (for round-trip checks)."""
    if fmt == "json":
        return json.loads(document)
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(document)))
        out = {}
        for key, cell in zip(rows[0], rows[1]):
            if cell == "":
                out[key] = None
            elif re.fullmatch(r"-?\d+", cell):
                out[key] = int(cell)
            else:
                out[key] = float(cell)
        return out
    raise ValidationError(f"unknown report format {fmt!r}")
