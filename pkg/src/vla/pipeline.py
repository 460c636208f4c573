"""Three-stage orchestration: caption + detect, review, correct + export.

Each image is processed by one worker and journaled as a self-contained
bundle the moment it completes, so an interrupted run can resume without
repeating agent calls. Canonical artifacts (results, audit log,
transcript, summary) are rewritten in image-id order at the end of the
run, which makes them byte-stable regardless of worker scheduling.

Crash injection for resume tests: when the VLA_CRASH_AFTER_IMAGES
environment variable is set to ``k``, the process hard-exits after the
k-th image bundle reaches the journal, simulating a kill.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .coco_io import load_coco_annotations, write_coco_results
from .errors import (
    AgentUnavailableError,
    ConfigMismatchError,
    OracleUnavailableError,
    ProtocolError,
    ValidationError,
)
from .gateway import (
    ROLE_CLASSIFIER,
    ROLE_DETECTOR,
    ROLE_LINGUISTIC,
    TRANSPORT_FILE,
    TRANSPORT_MOCK,
    AgentEndpointConfig,
    AgentGateway,
    EnvelopeRecorder,
    UNKNOWN_LABEL,
)
from .model import (
    STAGE_CORRECT,
    STAGE_REVIEW,
    BoundingBox,
    CategoryMap,
    Detection,
    SceneRecord,
    StageEvent,
    normalize_label,
)
from .oracle import OracleConfig, oracle_classifier_script, oracle_linguistic_script
from .protocol import (
    MODE_FREE_TEXT,
    MODE_STRUCTURED,
    PromptTemplates,
    Verdict,
    build_caption_request,
    build_classification_request,
    build_review_prompt,
    parse_verdicts,
)

log = logging.getLogger(__name__)

POLICY_RETAIN = "retain-original"
POLICY_DROP = "drop"

DISPOSITION_KEPT = "kept"
DISPOSITION_RELABELED = "relabeled"
DISPOSITION_DROPPED = "dropped"
DISPOSITION_EXCLUDED = "excluded-from-export"

_CRASH_ENV = "VLA_CRASH_AFTER_IMAGES"


@dataclass(frozen=True)
class AuditRecord:
    image_id: int
    det_id: int
    original_label: str
    original_score: float
    verdict: str
    suspected_label: str | None
    classifier_label: str | None
    classifier_confidence: float | None
    final_label: str
    final_score: float
    disposition: str

    def __post_init__(self):
        if self.disposition == DISPOSITION_RELABELED:
            if self.verdict != "unreasonable" or self.classifier_label is None:
                raise ValidationError(
                    "a relabeled disposition requires an unreasonable verdict "
                    "and a classifier outcome"
                )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    annotations: str
    detections: str | None = None
    output_dir: str = "vla-out"
    endpoints: dict = field(default_factory=dict)
    mode: str = MODE_STRUCTURED
    uncorrectable_policy: str = POLICY_RETAIN
    parallelism: int = 1
    seed: int = 0
    fail_fast: bool = False
    lenient_parse: bool = False
    fallback_free_text: bool = True
    include_scores_in_prompt: bool = False
    prompt_templates: str | None = None
    captions_file: str | None = None
    # restrict the scoring vocabulary to these names (annotation categories
    # outside the list stay known but are excluded from export and scoring)
    scoring_vocabulary: list | None = None
    # oracle rates, used when the linguistic/classifier transports are mock
    flag_accuracy: float = 1.0
    false_flag_rate: float = 0.0
    classifier_accuracy: float = 1.0
    match_iou_threshold: float = 0.5

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if self.uncorrectable_policy not in (POLICY_RETAIN, POLICY_DROP):
            raise ValidationError(f"unknown uncorrectable policy {self.uncorrectable_policy!r}")
        if self.mode not in (MODE_STRUCTURED, MODE_FREE_TEXT):
            raise ValidationError(f"unknown response mode {self.mode!r}")

    # output artifact paths
    @property
    def results_path(self) -> Path:
        return Path(self.output_dir) / "results.json"

    @property
    def audit_path(self) -> Path:
        return Path(self.output_dir) / "audit.jsonl"

    @property
    def transcript_path(self) -> Path:
        return Path(self.output_dir) / "transcript.jsonl"

    @property
    def summary_path(self) -> Path:
        return Path(self.output_dir) / "summary.json"

    @property
    def journal_path(self) -> Path:
        return Path(self.output_dir) / "run.journal.jsonl"

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["endpoints"] = {
            role: dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)
            for role, cfg in self.endpoints.items()
        }
        return out

    # Execution details that provably do not change outputs; they are free
    # to differ between an interrupted run and its resume.
    _HASH_EXCLUDED = ("output_dir", "parallelism")

    def hash_relevant_dict(self) -> dict:
        out = self.to_dict()
        for key in self._HASH_EXCLUDED:
            out.pop(key, None)
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.hash_relevant_dict(), sort_keys=True).encode()
        ).hexdigest()


def default_mock_endpoints(detections_path: str) -> dict:
    return {
        ROLE_DETECTOR: AgentEndpointConfig(
            role=ROLE_DETECTOR, transport=TRANSPORT_FILE, path=detections_path
        ),
        ROLE_LINGUISTIC: AgentEndpointConfig(role=ROLE_LINGUISTIC, transport=TRANSPORT_MOCK),
        ROLE_CLASSIFIER: AgentEndpointConfig(role=ROLE_CLASSIFIER, transport=TRANSPORT_MOCK),
    }


# -- serialization helpers ---------------------------------------------------


def _det_to_json(det: Detection) -> dict:
    return {
        "det_id": det.det_id,
        "image_id": det.image_id,
        "box": [det.box.x1, det.box.y1, det.box.x2, det.box.y2],
        "label": det.label,
        "score": det.score,
        "stage_history": [[e.stage, e.note, e.agent] for e in det.stage_history],
    }


def _det_from_json(data: dict) -> Detection:
    return Detection(
        det_id=data["det_id"],
        image_id=data["image_id"],
        box=BoundingBox(*data["box"]),
        label=data["label"],
        score=data["score"],
        stage_history=tuple(StageEvent(*e) for e in data["stage_history"]),
    )


def _verdict_to_json(v: Verdict) -> dict:
    return {
        "det_id": v.det_id,
        "judgment": v.judgment,
        "suspected_label": v.suspected_label,
        "rationale": v.rationale,
    }


# -- the run -----------------------------------------------------------------


class _Journal:
    """Append-only JSONL journal with crash-safe flushes."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._images_written = 0
        crash_after = os.environ.get(_CRASH_ENV)
        self._crash_after = int(crash_after) if crash_after else None

    def start(self, header: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def append_image(self, bundle: dict) -> None:
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"type": "image", **bundle}) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._images_written += 1
            if self._crash_after is not None and self._images_written >= self._crash_after:
                os._exit(86)

    @staticmethod
    def read(path: Path) -> tuple[dict | None, dict[int, dict]]:
        """Read a journal, tolerating a truncated trailing line."""
        header = None
        bundles: dict[int, dict] = {}
        if not path.exists():
            return None, {}
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break  # torn write from a crash; the image will be redone
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    break
                if record.get("type") == "header":
                    header = record
                elif record.get("type") == "image":
                    bundles[record["image_id"]] = record
        return header, bundles

    def rewrite(self, header: dict, bundles: dict[int, dict]) -> None:
        with self.path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for image_id in sorted(bundles):
                fh.write(json.dumps({"type": "image", **bundles[image_id]}) + "\n")


def _build_gateway(cfg: RunConfig, scenes_by_id, cats) -> AgentGateway:
    scripts = {}
    endpoints = dict(cfg.endpoints)
    if not endpoints:
        if not cfg.detections:
            raise ValidationError("mock runs need a detections file for the detector")
        endpoints = default_mock_endpoints(cfg.detections)
    oracle_cfg = OracleConfig(
        seed=cfg.seed,
        match_iou_threshold=cfg.match_iou_threshold,
        flag_accuracy=cfg.flag_accuracy,
        false_flag_rate=cfg.false_flag_rate,
        classifier_accuracy=cfg.classifier_accuracy,
    )
    for role, endpoint in endpoints.items():
        if endpoint.transport != TRANSPORT_MOCK:
            continue
        if role == ROLE_LINGUISTIC:
            scripts[role] = oracle_linguistic_script(scenes_by_id, cats, oracle_cfg, cfg.mode)
        elif role == ROLE_CLASSIFIER:
            scripts[role] = oracle_classifier_script(scenes_by_id, cats, oracle_cfg)
        else:
            raise ValidationError("the detector has no oracle script; use a file transport")
    return AgentGateway(endpoints, scripts)


def _process_scene(
    scene: SceneRecord,
    cats: CategoryMap,
    gateway: AgentGateway,
    cfg: RunConfig,
    templates: PromptTemplates,
    captions: dict[int, str],
) -> dict:
    recorder = EnvelopeRecorder(f"img{scene.image_id}")
    dets = gateway.detect(scene, cats, recorder)
    scene.attach_detections(dets)
    dets = scene.detections

    if scene.image_id in captions:
        scene.caption = captions[scene.image_id]
        caption_source = "pre-supplied"
    else:
        scene.caption = gateway.chat(build_caption_request(scene, templates), recorder)
        caption_source = "agent"

    verdicts: list[Verdict] = []
    if dets:
        prompt = build_review_prompt(
            scene.caption, dets, cfg.mode, templates, cfg.include_scores_in_prompt
        )
        response = gateway.chat(prompt.rendered, recorder)
        try:
            verdicts = parse_verdicts(response, dets, cfg.mode)
        except ProtocolError:
            if not (cfg.mode == MODE_STRUCTURED and cfg.fallback_free_text):
                raise
            verdicts = parse_verdicts(response, dets, MODE_FREE_TEXT)
    scene.verdicts = verdicts
    verdict_by_id = {v.det_id: v for v in verdicts}

    vocab = cats.vocabulary_names()
    corrected: list[Detection] = []
    dropped: set[int] = set()
    audit: list[AuditRecord] = []
    for det in dets:
        verdict = verdict_by_id[det.det_id]
        out = det.with_event(StageEvent(STAGE_REVIEW, verdict.judgment, "linguistic"))
        classifier_label: str | None = None
        classifier_conf: float | None = None
        disposition = DISPOSITION_KEPT
        if verdict.flagged:
            candidates = list(vocab)
            if verdict.suspected_label:
                candidates.append(verdict.suspected_label)
            request = build_classification_request(scene, det, candidates)
            classifier_label, classifier_conf = gateway.classify(request, recorder)
            if normalize_label(classifier_label) == UNKNOWN_LABEL:
                if cfg.uncorrectable_policy == POLICY_DROP:
                    dropped.add(det.det_id)
                    disposition = DISPOSITION_DROPPED
                    out = out.with_event(
                        StageEvent(STAGE_CORRECT, "uncorrectable: dropped", "classifier")
                    )
                else:
                    out = out.with_event(
                        StageEvent(STAGE_CORRECT, "uncorrectable: retained", "classifier")
                    )
            elif normalize_label(classifier_label) == normalize_label(det.label):
                # local evidence overrides the flag; the detection stands
                out = out.with_event(
                    StageEvent(STAGE_CORRECT, "flag overridden: label confirmed", "classifier")
                )
            else:
                out = out.relabeled(
                    classifier_label,
                    classifier_conf,
                    StageEvent(STAGE_CORRECT, f"{det.label} -> {classifier_label}", "classifier"),
                )
                disposition = DISPOSITION_RELABELED
        if disposition != DISPOSITION_DROPPED and not cats.in_vocabulary(out.label):
            disposition = DISPOSITION_EXCLUDED
        corrected.append(out)
        audit.append(
            AuditRecord(
                image_id=scene.image_id,
                det_id=det.det_id,
                original_label=det.label,
                original_score=det.score,
                verdict=verdict.judgment,
                suspected_label=verdict.suspected_label,
                classifier_label=classifier_label,
                classifier_confidence=classifier_conf,
                final_label=out.label,
                final_score=out.score,
                disposition=disposition,
            )
        )

    scene.corrected = corrected
    scene.dropped_ids = dropped
    return {
        "image_id": scene.image_id,
        "failed": None,
        "caption": scene.caption,
        "caption_source": caption_source,
        "detections": [_det_to_json(d) for d in dets],
        "corrected": [_det_to_json(d) for d in corrected],
        "dropped_ids": sorted(dropped),
        "verdicts": [_verdict_to_json(v) for v in verdicts],
        "audit": [record.to_json() for record in audit],
        "envelopes": [e.to_json() for e in recorder.envelopes],
    }


def _restore_scene(scene: SceneRecord, bundle: dict) -> None:
    scene.caption = bundle["caption"]
    scene.detections = [_det_from_json(d) for d in bundle["detections"]]
    scene.corrected = [_det_from_json(d) for d in bundle["corrected"]]
    scene.dropped_ids = set(bundle["dropped_ids"])
    scene.verdicts = [
        Verdict(
            det_id=v["det_id"],
            judgment=v["judgment"],
            suspected_label=v["suspected_label"],
            rationale=v["rationale"],
        )
        for v in bundle["verdicts"]
    ]


def run_pipeline(cfg: RunConfig, *, resume: bool = False) -> tuple[list[SceneRecord], dict]:
    """Run all three stages over every image; return scenes and the summary."""
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    cats, scenes = load_coco_annotations(cfg.annotations, strict=not cfg.lenient_parse)
    if cfg.scoring_vocabulary:
        cats.restrict_vocabulary(cfg.scoring_vocabulary)
    scenes_by_id = {s.image_id: s for s in scenes}
    gateway = _build_gateway(cfg, scenes_by_id, cats)
    templates = (
        PromptTemplates.load(cfg.prompt_templates) if cfg.prompt_templates else PromptTemplates()
    )
    captions: dict[int, str] = {}
    if cfg.captions_file:
        raw = json.loads(Path(cfg.captions_file).read_text(encoding="utf-8"))
        captions = {int(k): str(v) for k, v in raw.items()}

    header = {"type": "header", "config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    journal = _Journal(cfg.journal_path)
    done: dict[int, dict] = {}
    if resume:
        old_header, bundles = _Journal.read(cfg.journal_path)
        if old_header is None:
            raise ValidationError(f"no journal to resume at {cfg.journal_path}")
        if old_header.get("config_hash") != cfg.config_hash():
            old_cfg = dict(old_header.get("config", {}))
            for key in RunConfig._HASH_EXCLUDED:
                old_cfg.pop(key, None)
            raise ConfigMismatchError(_config_diff(old_cfg, cfg.hash_relevant_dict()))
        done = {i: b for i, b in bundles.items() if b.get("failed") is None}
        journal.start(header)
        for image_id in sorted(done):
            journal.append_image(done[image_id])
    else:
        journal.start(header)

    pending = [s for s in scenes if s.image_id not in done]
    failures: dict[int, str] = {}

    def work(scene: SceneRecord) -> None:
        try:
            bundle = _process_scene(scene, cats, gateway, cfg, templates, captions)
        except (AgentUnavailableError, ProtocolError, OracleUnavailableError) as exc:
            if cfg.fail_fast:
                raise
            log.warning("image %s failed: %s", scene.image_id, exc)
            bundle = {"image_id": scene.image_id, "failed": str(exc)}
        if bundle["failed"] is None:
            done[scene.image_id] = bundle
        else:
            failures[scene.image_id] = bundle["failed"]
        journal.append_image(bundle)

    if cfg.parallelism == 1:
        for scene in pending:
            work(scene)
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            list(pool.map(work, pending))

    for image_id, bundle in done.items():
        _restore_scene(scenes_by_id[image_id], bundle)

    summary = _finalize(cfg, cats, scenes, done, failures, header)
    journal.rewrite(header, {**done, **{
        i: {"type": "image", "image_id": i, "failed": msg} for i, msg in failures.items()
    }})
    return scenes, summary


def resume_run(cfg: RunConfig) -> tuple[list[SceneRecord], dict]:
    """Complete an interrupted run; a finished journal makes this a no-op."""
    return run_pipeline(cfg, resume=True)


def _config_diff(old: dict, new: dict) -> dict:
    changed = {}

    def walk(prefix: str, a, b) -> None:
        if isinstance(a, dict) and isinstance(b, dict):
            for key in sorted(set(a) | set(b)):
                walk(f"{prefix}.{key}" if prefix else str(key), a.get(key), b.get(key))
        elif a != b:
            changed[prefix] = (a, b)

    walk("", old, new)
    return changed


def _finalize(cfg, cats, scenes, done, failures, header) -> dict:
    ordered = sorted(done)
    with cfg.audit_path.open("w", encoding="utf-8") as fh:
        for image_id in ordered:
            for record in done[image_id]["audit"]:
                fh.write(json.dumps(record) + "\n")
    with cfg.transcript_path.open("w", encoding="utf-8") as fh:
        for image_id in ordered:
            for envelope in done[image_id]["envelopes"]:
                fh.write(json.dumps(envelope) + "\n")

    ok_scenes = [s for s in scenes if s.image_id in done]
    write_stats = write_coco_results(ok_scenes, cfg.results_path, cats)

    dispositions = {d: 0 for d in (
        DISPOSITION_KEPT, DISPOSITION_RELABELED, DISPOSITION_DROPPED, DISPOSITION_EXCLUDED
    )}
    flagged = relabeled_total = detections = 0
    for image_id in ordered:
        for record in done[image_id]["audit"]:
            detections += 1
            dispositions[record["disposition"]] += 1
            if record["verdict"] == "unreasonable":
                flagged += 1
            if (
                record["classifier_label"] is not None
                and normalize_label(record["final_label"])
                != normalize_label(record["original_label"])
            ):
                relabeled_total += 1

    summary = {
        "config_hash": header["config_hash"],
        "images": len(scenes),
        "processed": len(done),
        "failed_images": sorted(failures),
        "detections": detections,
        "flagged": flagged,
        "relabeled": relabeled_total,
        "dropped": dispositions[DISPOSITION_DROPPED],
        "excluded_from_export": write_stats["excluded"],
        "written_results": write_stats["written"],
        "dispositions": dispositions,
    }
    cfg.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8")
    return summary
