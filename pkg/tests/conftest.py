from __future__ import annotations

import json
import random

import pytest

from vla.model import (
    BoundingBox,
    Category,
    CategoryMap,
    Detection,
    GroundTruthObject,
    SceneRecord,
    StageEvent,
    make_det_id,
)


def make_detection(image_id, index, box, label, score=0.9, agent="detector"):
    return Detection(
        det_id=make_det_id(image_id, index),
        image_id=image_id,
        box=BoundingBox(*box),
        label=label,
        score=score,
        stage_history=(StageEvent("detect", label, agent),),
    )


@pytest.fixture
def sky_cats() -> CategoryMap:
    """airplane/orange are scoreable; moon exists but is out of vocabulary."""
    return CategoryMap(
        [
            Category(1, "airplane"),
            Category(2, "orange"),
            Category(3, "moon", in_vocabulary=False),
        ]
    )


@pytest.fixture
def sky_scene(sky_cats) -> SceneRecord:
    """An airplane in the sky plus the moon, which the detector calls an orange."""
    scene = SceneRecord(image_id=7, width=640.0, height=480.0, image_ref="sky.jpg")
    scene.ground_truth = [
        GroundTruthObject.build(7, BoundingBox(320, 49, 640, 150), 1),
        GroundTruthObject.build(7, BoundingBox(100, 350, 190, 480), 3),
    ]
    scene.attach_detections(
        [
            make_detection(7, 0, (320, 49, 640, 150), "airplane", 0.95),
            make_detection(7, 1, (100, 350, 190, 480), "orange", 0.90),
        ]
    )
    return scene


def random_box(rng: random.Random, width=320, height=240) -> BoundingBox:
    w = rng.randint(4, 120)
    h = rng.randint(4, 120)
    x = rng.randint(0, width - w)
    y = rng.randint(0, height - h)
    return BoundingBox(float(x), float(y), float(x + w), float(y + h))


def random_micro_scenes(rng: random.Random):
    """Up to 5 images, 10 detections total, 4 categories; crowds included."""
    n_cats = rng.randint(1, 4)
    cats = CategoryMap([Category(k + 1, f"c{k}") for k in range(n_cats)])
    n_images = rng.randint(1, 5)
    scenes = []
    det_budget = rng.randint(0, 10)
    dets_placed = 0
    for i in range(n_images):
        scene = SceneRecord(image_id=i + 1, width=320.0, height=240.0)
        for _ in range(rng.randint(0, 4)):
            box = random_box(rng)
            scene.ground_truth.append(
                GroundTruthObject.build(
                    scene.image_id,
                    box,
                    rng.randint(1, n_cats),
                    iscrowd=rng.random() < 0.2,
                    area=box.area,
                )
            )
        dets = []
        index = 0
        while dets_placed < det_budget and rng.random() < 0.75:
            if scene.ground_truth and rng.random() < 0.7:
                # perturb a ground-truth box so IoU spans the thresholds
                gt = rng.choice(scene.ground_truth)
                jitter = rng.uniform(0, 0.4)
                dx = gt.box.width * jitter * rng.choice((-1, 1))
                dy = gt.box.height * jitter * rng.choice((-1, 1))
                x1 = min(max(gt.box.x1 + dx, 0.0), 320.0)
                y1 = min(max(gt.box.y1 + dy, 0.0), 240.0)
                x2 = min(max(gt.box.x2 + dx, x1), 320.0)
                y2 = min(max(gt.box.y2 + dy, y1), 240.0)
                box = BoundingBox(x1, y1, x2, y2)
            else:
                box = random_box(rng)
            label = f"c{rng.randrange(n_cats)}"
            score = rng.choice([round(rng.random(), 2), rng.choice([0.5, 0.9, 1.0])])
            dets.append(
                make_detection(
                    scene.image_id,
                    index,
                    (box.x1, box.y1, box.x2, box.y2),
                    label,
                    score,
                )
            )
            index += 1
            dets_placed += 1
        scene.attach_detections(dets)
        scenes.append(scene)
    return cats, scenes


def write_coco_files(tmp_path, document, results, prefix=""):
    ann = tmp_path / f"{prefix}annotations.json"
    res = tmp_path / f"{prefix}detections.json"
    ann.write_text(json.dumps(document), encoding="utf-8")
    res.write_text(json.dumps(results), encoding="utf-8")
    return ann, res
