"""Desk-scale oracle experiments: synthesize, corrupt, repair, score.

The flow mirrors a real evaluation campaign but swaps every model for the
ground-truth oracles, which makes correction-rate arithmetic exactly
predictable from the configured error rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .coco_io import load_coco_annotations, load_coco_results, write_coco_results
from .evaluation import CorrectionReport, EvalReport, correction_metrics, evaluate_coco
from .oracle import inject_label_noise, write_manifest
from .pipeline import RunConfig, run_pipeline
from .synth import SynthSpec, write_synth


@dataclass(frozen=True)
class OracleExperimentSpec:
    images: int = 200
    objects_per_image: tuple[int, int] = (3, 8)
    category_count: int = 5
    overlap: str = "mixed"
    noise_rate: float = 0.2
    synth_seed: int = 101
    noise_seed: int = 202
    run_seed: int = 303
    flag_accuracy: float = 1.0
    false_flag_rate: float = 0.0
    classifier_accuracy: float = 1.0
    parallelism: int = 1


@dataclass
class OracleExperimentResult:
    pre: EvalReport
    post: EvalReport
    correction: CorrectionReport
    summary: dict
    manifest_size: int
    workdir: Path
    run_dir: Path


def run_oracle_experiment(
    spec: OracleExperimentSpec, workdir, run_name: str = "run"
) -> OracleExperimentResult:
    """Run the experiment; repeated calls with distinct ``run_name`` values
    share the synthesized inputs, so their artifacts are comparable."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    annotations = workdir / "annotations.json"
    perfect = workdir / "perfect.json"
    corrupted = workdir / "detections.json"

    write_synth(
        SynthSpec(
            image_count=spec.images,
            objects_per_image=spec.objects_per_image,
            category_count=spec.category_count,
            overlap=spec.overlap,
            seed=spec.synth_seed,
        ),
        annotations,
        perfect,
    )

    cats, scenes = load_coco_annotations(annotations)
    dets = load_coco_results(perfect, cats)
    by_image: dict[int, list] = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)
    for scene in scenes:
        scene.attach_detections(by_image.get(scene.image_id, []))
    manifest = inject_label_noise(scenes, spec.noise_rate, spec.noise_seed, cats)
    write_coco_results(scenes, corrupted, cats)
    write_manifest(manifest, workdir / "noise-manifest.jsonl")

    cfg = RunConfig(
        annotations=str(annotations),
        detections=str(corrupted),
        output_dir=str(workdir / run_name),
        seed=spec.run_seed,
        parallelism=spec.parallelism,
        flag_accuracy=spec.flag_accuracy,
        false_flag_rate=spec.false_flag_rate,
        classifier_accuracy=spec.classifier_accuracy,
    )
    run_scenes, summary = run_pipeline(cfg)

    eval_cats, _ = load_coco_annotations(annotations)
    pre = evaluate_coco(run_scenes, eval_cats, stage="raw")
    post = evaluate_coco(run_scenes, eval_cats, stage="final")
    correction = correction_metrics(run_scenes, eval_cats)
    return OracleExperimentResult(
        pre=pre,
        post=post,
        correction=correction,
        summary=summary,
        manifest_size=len(manifest),
        workdir=workdir,
        run_dir=workdir / run_name,
    )
