"""Command-line entry point.

Subcommands: run, evaluate, correction-report, analyze-ig, serve-mock,
validate-protocol. Exit codes: 0 success, 1 fatal error, 2 partial
failure (a run finished but some images failed).
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .coco_io import load_coco_annotations, load_coco_results
from .errors import ValidationError, VlaError
from .evaluation import (
    CorrectionReport,
    correction_metrics,
    evaluate_coco,
    render_report,
)
from .gateway import (
    ROLES,
    AgentEndpointConfig,
    validate_classify_response,
    validate_detect_response,
    validate_verdict_objects,
)
from .infogain import RelationTable, global_entropy, information_gain, weighted_entropy
from .model import BoundingBox
from .oracle import OracleConfig
from .pipeline import RunConfig, run_pipeline
from .protocol import MODE_STRUCTURED

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    if p.suffix == ".json":
        return json.loads(p.read_text(encoding="utf-8"))
    with p.open("rb") as fh:
        return tomllib.load(fh)


def _build_run_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        raw = _load_config_file(args.config)
    endpoints_raw = raw.pop("endpoints", {})

    overrides = {
        "annotations": args.annotations,
        "detections": args.detections,
        "output_dir": args.output_dir,
        "seed": args.seed,
        "mode": args.mode,
        "parallelism": args.parallelism,
        "uncorrectable_policy": args.policy,
        "flag_accuracy": args.flag_accuracy,
        "false_flag_rate": args.false_flag_rate,
        "classifier_accuracy": args.classifier_accuracy,
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value

    if "annotations" not in raw:
        raise ValidationError("run config is missing required field: annotations")
    if args.agents == "mock":
        endpoints_raw = {}  # force the built-in mock endpoints
        if "detections" not in raw or raw.get("detections") is None:
            raise ValidationError("run config is missing required field: detections")
        if raw.get("seed") is None:
            raise ValidationError("mock runs require an explicit seed")

    endpoints = {}
    for role, table in endpoints_raw.items():
        if role not in ROLES:
            raise ValidationError(f"config endpoints: unknown role {role!r}")
        endpoints[role] = AgentEndpointConfig(role=role, **table)
    if args.agents != "mock" and endpoints and len(endpoints) < 3:
        missing = sorted(set(ROLES) - set(endpoints))
        raise ValidationError(f"config endpoints: missing role(s) {', '.join(missing)}")

    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown run config field(s): {sorted(unknown)}")
    return RunConfig(endpoints=endpoints, **raw)


def cmd_run(args) -> int:
    cfg = _build_run_config(args)
    _scenes, summary = run_pipeline(cfg, resume=args.resume)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(
            f"processed {summary['processed']}/{summary['images']} images: "
            f"{summary['detections']} detections, {summary['flagged']} flagged, "
            f"{summary['relabeled']} relabeled, {summary['dropped']} dropped, "
            f"{summary['excluded_from_export']} excluded from export"
        )
        print(f"artifacts in {cfg.output_dir}")
    return EXIT_PARTIAL if summary["failed_images"] else EXIT_OK


def _load_scenes_with_results(annotations, results, *, lenient: bool):
    cats, scenes = load_coco_annotations(annotations, strict=not lenient)
    known = {s.image_id for s in scenes}
    dets = load_coco_results(results, cats, known_image_ids=known, strict=not lenient)
    by_image: dict[int, list] = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)
    for scene in scenes:
        scene.attach_detections(by_image.get(scene.image_id, []))
    return cats, scenes


def cmd_evaluate(args) -> int:
    """AP of a results file; with --audit, the results file is treated as the
    original detections, audit corrections are applied, and the corrected
    set is scored alongside ED/CD/CR."""
    cats, scenes = _load_scenes_with_results(args.annotations, args.results, lenient=args.lenient)
    corr = None
    if args.audit:
        _apply_audit(scenes, args.audit)
        corr = correction_metrics(scenes, cats, match_iou=args.match_iou)
        report = evaluate_coco(scenes, cats, stage="final")
    else:
        report = evaluate_coco(scenes, cats, stage="raw")
    sys.stdout.write(render_report(report, corr, args.format))
    return EXIT_OK


def _apply_audit(scenes, audit_path) -> None:
    from dataclasses import replace as _replace

    final_labels: dict[int, tuple[str, float, str]] = {}
    for line in Path(audit_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        final_labels[record["det_id"]] = (
            record["final_label"],
            record["final_score"],
            record["disposition"],
        )
    for scene in scenes:
        corrected = []
        dropped = set()
        for det in scene.detections:
            if det.det_id in final_labels:
                label, score, disposition = final_labels[det.det_id]
                if disposition == "dropped":
                    dropped.add(det.det_id)
                corrected.append(_replace(det, label=label, score=score))
            else:
                corrected.append(det)
        scene.corrected = corrected
        scene.dropped_ids = dropped


def cmd_correction_report(args) -> int:
    if args.ed is not None or args.cd is not None:
        if args.ed is None or args.cd is None:
            raise ValidationError("--ed and --cd must be given together")
        corr = CorrectionReport(ed=args.ed, cd=args.cd)
    else:
        if not (args.annotations and args.detections and args.audit):
            raise ValidationError(
                "correction-report needs either --ed/--cd or "
                "--annotations, --detections and --audit"
            )
        cats, scenes = _load_scenes_with_results(
            args.annotations, args.detections, lenient=args.lenient
        )
        _apply_audit(scenes, args.audit)
        corr = correction_metrics(scenes, cats, match_iou=args.match_iou)
    sys.stdout.write(render_report(None, corr, args.format))
    return EXIT_OK


def cmd_analyze_ig(args) -> int:
    table = RelationTable.load(args.relations)
    hyr = global_entropy(table)

    data = json.loads(Path(args.detections).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValidationError(f"{args.detections}: must be a COCO results array")
    by_image: dict[int, list[tuple[float, BoundingBox]]] = {}
    for entry in data:
        x, y, w, h = (float(v) for v in entry["bbox"])
        by_image.setdefault(int(entry["image_id"]), []).append(
            (float(entry["score"]), BoundingBox(x, y, x + w, y + h))
        )

    rows = []
    for image_id in sorted(by_image):
        probs = [p for p, _ in by_image[image_id]]
        boxes = [b for _, b in by_image[image_id]]
        hw = weighted_entropy(probs, boxes)
        rows.append({"image_id": image_id, "n": len(probs), "h_w": hw,
                     "ig": information_gain(hw, hyr)})
    mean_hw = sum(r["h_w"] for r in rows) / len(rows) if rows else 0.0

    if args.json:
        print(json.dumps({
            "per_image": rows,
            "h_yr": hyr,
            "aggregate": {"mean_h_w": mean_hw, "ig": information_gain(mean_hw, hyr)},
        }, sort_keys=True))
    else:
        for r in rows:
            print(f"image {r['image_id']}: n={r['n']} H_w={r['h_w']:.4f} IG={r['ig']:.4f}")
        print(f"H(Y,R)={hyr:.4f}")
        print(f"aggregate: mean H_w={mean_hw:.4f} IG={information_gain(mean_hw, hyr):.4f}")
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    from .mockserver import serve_mock

    oracle_cfg = OracleConfig(
        seed=args.seed,
        flag_accuracy=args.flag_accuracy,
        false_flag_rate=args.false_flag_rate,
        classifier_accuracy=args.classifier_accuracy,
    )
    server = serve_mock(
        args.annotations, args.detections, oracle_cfg,
        host=args.host, port=args.port, mode=args.mode,
    )
    host, port = server.server_address[:2]
    print(f"mock agents listening on http://{host}:{port}")
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    try:
        while not stop:
            signal.pause()
    finally:
        server.shutdown()
    return EXIT_OK


def _validate_envelope(record: dict, number: int) -> list[str]:
    problems = []
    where = f"record {number}"
    role = record.get("role")
    if role not in ROLES:
        return [f"{where}: unknown role {role!r}"]
    if not isinstance(record.get("request_id"), str):
        problems.append(f"{where}: request_id must be a string")
    attempt = record.get("attempt")
    if not (isinstance(attempt, int) and attempt >= 1):
        problems.append(f"{where}: attempt must be an integer >= 1")
    if record.get("status") not in ("ok", "error"):
        problems.append(f"{where}: status must be ok or error")
    if record.get("status") != "ok":
        return problems

    response = record.get("response")
    request = record.get("request")
    if role == "detector":
        problems += [f"{where}: {p}" for p in validate_detect_response(response)]
    elif role == "classifier":
        candidates = request.get("candidates") if isinstance(request, dict) else None
        problems += [f"{where}: {p}" for p in validate_classify_response(response, candidates)]
    else:
        content = response
        if isinstance(response, dict):  # full chat-completion body
            try:
                content = response["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                problems.append(f"{where}: malformed chat-completion response")
                content = None
        if content is not None and not isinstance(content, str):
            problems.append(f"{where}: linguistic response content must be text")
        elif isinstance(content, str) and content.lstrip().startswith("["):
            try:
                body = json.loads(content)
            except json.JSONDecodeError:
                body = None
            if body is not None:
                problems += [f"{where}: {p}" for p in validate_verdict_objects(body)]
    return problems


def cmd_validate_protocol(args) -> int:
    path = Path(args.transcript)
    if not path.exists():
        raise ValidationError(f"transcript not found: {args.transcript}")
    violations = []
    checked = 0
    with path.open("r", encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.endswith("\n") and not line.strip():
                break
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                violations.append(f"record {number}: not valid JSON (truncated line?)")
                continue
            checked += 1
            violations.extend(_validate_envelope(record, number))
    if args.json:
        print(json.dumps({"checked": checked, "violations": violations}, sort_keys=True))
    else:
        for v in violations:
            print(v)
        print(f"checked {checked} envelopes, {len(violations)} violation(s)")
    return EXIT_FATAL if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vla",
        description="Detection review and correction pipeline with agent collaboration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the three-stage pipeline")
    p_run.add_argument("--config", help="TOML or JSON run config")
    p_run.add_argument("--annotations")
    p_run.add_argument("--detections")
    p_run.add_argument("--output-dir")
    p_run.add_argument("--agents", choices=["mock", "config"], default="config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--mode", choices=["structured-json", "free-text"])
    p_run.add_argument("--parallelism", type=int)
    p_run.add_argument("--policy", choices=["retain-original", "drop"])
    p_run.add_argument("--flag-accuracy", type=float)
    p_run.add_argument("--false-flag-rate", type=float)
    p_run.add_argument("--classifier-accuracy", type=float)
    p_run.add_argument("--resume", action="store_true")
    p_run.add_argument("--json", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("evaluate", help="COCO-protocol AP evaluation")
    p_eval.add_argument("--annotations", required=True)
    p_eval.add_argument("--results", required=True)
    p_eval.add_argument("--audit", help="also compute correction metrics from this audit log")
    p_eval.add_argument("--match-iou", type=float, default=0.5)
    p_eval.add_argument("--lenient", action="store_true")
    p_eval.add_argument("--format", choices=["text-table", "json", "csv"], default="text-table")
    p_eval.set_defaults(func=cmd_evaluate)

    p_corr = sub.add_parser("correction-report", help="ED/CD/CR correction metrics")
    p_corr.add_argument("--ed", type=int)
    p_corr.add_argument("--cd", type=int)
    p_corr.add_argument("--annotations")
    p_corr.add_argument("--detections")
    p_corr.add_argument("--audit")
    p_corr.add_argument("--match-iou", type=float, default=0.5)
    p_corr.add_argument("--lenient", action="store_true")
    p_corr.add_argument("--format", choices=["text-table", "json", "csv"], default="text-table")
    p_corr.set_defaults(func=cmd_correction_report)

    p_ig = sub.add_parser("analyze-ig", help="weighted entropy and information gain")
    p_ig.add_argument("--detections", required=True)
    p_ig.add_argument("--relations", required=True)
    p_ig.add_argument("--json", action="store_true")
    p_ig.set_defaults(func=cmd_analyze_ig)

    p_mock = sub.add_parser("serve-mock", help="serve oracle agents over HTTP")
    p_mock.add_argument("--annotations", required=True)
    p_mock.add_argument("--detections", required=True)
    p_mock.add_argument("--host", default="127.0.0.1")
    p_mock.add_argument("--port", type=int, default=8808)
    p_mock.add_argument("--seed", type=int, required=True)
    p_mock.add_argument("--flag-accuracy", type=float, default=1.0)
    p_mock.add_argument("--false-flag-rate", type=float, default=0.0)
    p_mock.add_argument("--classifier-accuracy", type=float, default=1.0)
    p_mock.add_argument("--mode", choices=["structured-json", "free-text"],
                        default=MODE_STRUCTURED)
    p_mock.set_defaults(func=cmd_serve_mock)

    p_val = sub.add_parser("validate-protocol", help="check a transcript against wire schemas")
    p_val.add_argument("transcript")
    p_val.add_argument("--json", action="store_true")
    p_val.set_defaults(func=cmd_validate_protocol)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VlaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
