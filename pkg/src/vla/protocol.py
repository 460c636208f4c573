"""Review-prompt construction and verdict parsing.

The review protocol has two response formats:

- ``structured-json`` (default): the prompt instructs the agent to answer
  with a JSON array, one object per detection::

      [{"det_id": <int>, "judgment": "reasonable" | "unreasonable",
        "suspected_label": <string or null>, "rationale": <string>}, ...]

- ``free-text``: plain sentences of the form
  ``"<Label> detection is reasonable."`` /
  ``"<Label> detection is unreasonable, as the object is likely the <label>."``

Prompt wording lives in ``PromptTemplates`` so experiments can vary it from
a config file without code changes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyInputError, ProtocolError, ValidationError
from .model import BoundingBox, Detection, SceneRecord, normalize_label

MODE_STRUCTURED = "structured-json"
MODE_FREE_TEXT = "free-text"
MODES = (MODE_STRUCTURED, MODE_FREE_TEXT)

JUDGMENT_REASONABLE = "reasonable"
JUDGMENT_UNREASONABLE = "unreasonable"

CLOSING_QUESTION = "Are these results reasonable based on the scene context?"

_DEFAULT_TEMPLATES = {
    "caption_request": (
        "Generate a contextual image caption for image id {image_id}{ref_clause}: "
        "summarize the scene in one to three sentences."
    ),
    "caption_line": 'Scene caption: "{caption}"',
    "review_header": "The object detector identified the following objects:",
    "detection_line": "- {label}, coordinates: ({x1}, {y1}), ({x2}, {y2})",
    "detection_line_scored": (
        "- {label}, coordinates: ({x1}, {y1}), ({x2}, {y2}), confidence: {score:.2f}"
    ),
    "closing_question": CLOSING_QUESTION,
    "structured_directive": (
        "Respond with only a JSON array containing one object per detection, "
        'each shaped {{"det_id": <int>, "judgment": "reasonable" or "unreasonable", '
        '"suspected_label": <string or null>, "rationale": <string>}}. '
        "Use these det_id values, in the order the detections are listed: {id_list}."
    ),
    "free_text_directive": (
        "For each detection, answer with a sentence of the form "
        '"<Label> detection is reasonable." or '
        '"<Label> detection is unreasonable, as the object is likely the <label>."'
    ),
}


@dataclass(frozen=True)
class PromptTemplates:
    templates: dict = field(default_factory=dict)

    def get(self, key: str) -> str:
        return self.templates.get(key, _DEFAULT_TEMPLATES[key])

    @classmethod
    def load(cls, path) -> "PromptTemplates":
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(overrides) - set(_DEFAULT_TEMPLATES)
        if unknown:
            raise ValidationError(f"unknown prompt template keys: {sorted(unknown)}")
        return cls(overrides)


@dataclass(frozen=True)
class Verdict:
    det_id: int
    judgment: str
    suspected_label: str | None = None
    rationale: str = ""

    def __post_init__(self):
        if self.judgment not in (JUDGMENT_REASONABLE, JUDGMENT_UNREASONABLE):
            raise ValidationError(f"unknown judgment {self.judgment!r}")
        if self.judgment == JUDGMENT_REASONABLE and self.suspected_label is not None:
            raise ValidationError("suspected label is only meaningful on an unreasonable verdict")

    @property
    def flagged(self) -> bool:
        return self.judgment == JUDGMENT_UNREASONABLE


@dataclass(frozen=True)
class ReviewPrompt:
    caption: str
    detection_lines: tuple[tuple[int, str, tuple[int, int, int, int]], ...]
    rendered: str
    mode: str


@dataclass(frozen=True)
class ClassificationRequest:
    image_id: int
    image_ref: str | None
    det_id: int
    region: BoundingBox
    candidates: tuple[str, ...]

    def to_wire(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_ref": self.image_ref,
            "det_id": self.det_id,
            "region": [self.region.x1, self.region.y1, self.region.x2, self.region.y2],
            "candidates": list(self.candidates),
        }


def round_half_away(x: float) -> int:
    """Round with halves away from zero (100.4 -> 100, 350.6 -> 351)."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def _display_label(label: str) -> str:
    return label[:1].upper() + label[1:] if label else label


def build_caption_request(scene: SceneRecord, templates: PromptTemplates | None = None) -> str:
    """One deterministic instruction asking for a short scene caption."""
    templates = templates or PromptTemplates()
    ref_clause = f" ({scene.image_ref})" if scene.image_ref else ""
    return templates.get("caption_request").format(image_id=scene.image_id, ref_clause=ref_clause)


def build_review_prompt(
    caption: str,
    dets: list[Detection],
    mode: str = MODE_STRUCTURED,
    templates: PromptTemplates | None = None,
    include_scores: bool = False,
) -> ReviewPrompt:
    """Render the review prompt: caption, one line per detection, question.

    Detector confidences are omitted by default; ``include_scores`` switches
    to the scored line template.
    """
    if not dets:
        raise EmptyInputError("review prompt requires at least one detection")
    if mode not in MODES:
        raise ValidationError(f"unknown response mode {mode!r}")
    templates = templates or PromptTemplates()

    line_key = "detection_line_scored" if include_scores else "detection_line"
    lines = []
    entries = []
    for det in dets:
        coords = (
            round_half_away(det.box.x1),
            round_half_away(det.box.y1),
            round_half_away(det.box.x2),
            round_half_away(det.box.y2),
        )
        entries.append((det.det_id, det.label, coords))
        lines.append(
            templates.get(line_key).format(
                label=_display_label(det.label),
                x1=coords[0],
                y1=coords[1],
                x2=coords[2],
                y2=coords[3],
                score=det.score,
            )
        )

    parts = [
        templates.get("caption_line").format(caption=caption),
        templates.get("review_header"),
        *lines,
        templates.get("closing_question"),
    ]
    if mode == MODE_STRUCTURED:
        id_list = ", ".join(f"{det.det_id} ({_display_label(det.label)})" for det in dets)
        parts.append("")
        parts.append(templates.get("structured_directive").format(id_list=id_list))
    else:
        parts.append("")
        parts.append(templates.get("free_text_directive"))

    return ReviewPrompt(
        caption=caption,
        detection_lines=tuple(entries),
        rendered="\n".join(parts),
        mode=mode,
    )


def render_structured_verdicts(verdicts: list[Verdict]) -> str:
    """The canonical structured response body for a verdict list."""
    return json.dumps(
        [
            {
                "det_id": v.det_id,
                "judgment": v.judgment,
                "suspected_label": v.suspected_label,
                "rationale": v.rationale,
            }
            for v in verdicts
        ]
    )


def _extract_json_array(text: str):
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = re.sub(r"^```[a-zA-Z]*\s*", "", stripped)
        stripped = re.sub(r"\s*```$", "", stripped)
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        start, end = stripped.find("["), stripped.rfind("]")
        if 0 <= start < end:
            try:
                return json.loads(stripped[start : end + 1])
            except json.JSONDecodeError:
                pass
    raise ProtocolError("response is not valid JSON", raw_response=text)


def _parse_structured(response: str, dets: list[Detection]) -> list[Verdict]:
    data = _extract_json_array(response)
    if not isinstance(data, list):
        raise ProtocolError("structured response must be a JSON array", raw_response=response)

    known = {det.det_id for det in dets}
    by_id: dict[int, Verdict] = {}
    for item in data:
        if not isinstance(item, dict) or "det_id" not in item or "judgment" not in item:
            raise ProtocolError(f"malformed verdict object: {item!r}", raw_response=response)
        det_id = item["det_id"]
        if not isinstance(det_id, int) or det_id not in known:
            raise ProtocolError(f"verdict for unknown det_id {det_id!r}", raw_response=response)
        if det_id in by_id:
            raise ProtocolError(f"duplicate verdict for det_id {det_id}", raw_response=response)
        judgment = item["judgment"]
        if judgment not in (JUDGMENT_REASONABLE, JUDGMENT_UNREASONABLE):
            raise ProtocolError(f"unknown judgment {judgment!r}", raw_response=response)
        suspected = item.get("suspected_label")
        if judgment == JUDGMENT_REASONABLE:
            suspected = None
        by_id[det_id] = Verdict(
            det_id=det_id,
            judgment=judgment,
            suspected_label=None if suspected is None else str(suspected),
            rationale=str(item.get("rationale") or ""),
        )

    # Unmentioned detections default to reasonable; output follows input order.
    return [
        by_id.get(det.det_id, Verdict(det_id=det.det_id, judgment=JUDGMENT_REASONABLE))
        for det in dets
    ]


_SENTENCE_RE = re.compile(
    r"([A-Za-z][A-Za-z0-9 _'-]*?)\s+detection\s+is\s+(reasonable|unreasonable)",
    re.IGNORECASE,
)
_SUSPECT_RE = re.compile(r"likely\s+(?:the|an|a)\s+([A-Za-z][A-Za-z0-9_-]*)", re.IGNORECASE)


def _parse_free_text(response: str, dets: list[Detection]) -> list[Verdict]:
    matches = list(_SENTENCE_RE.finditer(response))
    mentions: list[tuple[str, str, str | None]] = []
    for idx, m in enumerate(matches):
        label = m.group(1).strip()
        judgment = m.group(2).lower()
        # The suspected label, when given, trails in the same sentence.
        tail_end = matches[idx + 1].start() if idx + 1 < len(matches) else len(response)
        tail = response[m.end() : tail_end]
        suspected = None
        if judgment == JUDGMENT_UNREASONABLE:
            s = _SUSPECT_RE.search(tail)
            if s:
                suspected = s.group(1)
        mentions.append((label, judgment, suspected))

    # Free-text verdicts carry no ids: match by label, ties broken by order.
    assigned: dict[int, Verdict] = {}
    for label, judgment, suspected in mentions:
        key = normalize_label(label)
        for det in dets:
            if det.det_id in assigned or normalize_label(det.label) != key:
                continue
            assigned[det.det_id] = Verdict(
                det_id=det.det_id,
                judgment=judgment,
                suspected_label=suspected if judgment == JUDGMENT_UNREASONABLE else None,
                rationale="",
            )
            break

    return [
        assigned.get(det.det_id, Verdict(det_id=det.det_id, judgment=JUDGMENT_REASONABLE))
        for det in dets
    ]


def parse_verdicts(response: str, dets: list[Detection], mode: str = MODE_STRUCTURED) -> list[Verdict]:
    """Parse an agent response into exactly one Verdict per detection."""
    if not response or not response.strip():
        raise ProtocolError("empty review response", raw_response=response)
    if mode == MODE_STRUCTURED:
        return _parse_structured(response, dets)
    if mode == MODE_FREE_TEXT:
        return _parse_free_text(response, dets)
    raise ValidationError(f"unknown response mode {mode!r}")


def dedupe_candidates(candidates: list[str]) -> tuple[str, ...]:
    seen: set[str] = set()
    out = []
    for name in candidates:
        key = normalize_label(name)
        if key in seen:
            continue
        seen.add(key)
        out.append(name)
    return tuple(out)


def build_classification_request(
    scene: SceneRecord, det: Detection, candidates: list[str]
) -> ClassificationRequest:
    """Package a flagged region for the classification agent."""
    return ClassificationRequest(
        image_id=scene.image_id,
        image_ref=scene.image_ref,
        det_id=det.det_id,
        region=det.box,
        candidates=dedupe_candidates(candidates),
    )
