import math

import pytest

from vla.errors import OracleUnavailableError, ValidationError
from vla.model import (
    BoundingBox,
    Category,
    CategoryMap,
    GroundTruthObject,
    SceneRecord,
)
from vla.oracle import (
    OracleConfig,
    best_gt_match,
    inject_label_noise,
    oracle_classify,
    oracle_classifier_script,
    oracle_linguistic_script,
    oracle_review,
    unit_uniform,
)
from vla.protocol import MODE_FREE_TEXT, build_review_prompt, parse_verdicts

from .conftest import make_detection


def two_cat_map():
    return CategoryMap([Category(1, "orange"), Category(2, "moon")])


def scene_with_mislabel(image_id=1):
    """GT is a moon; the detector called it an orange."""
    cats = two_cat_map()
    scene = SceneRecord(image_id=image_id, width=640.0, height=480.0)
    scene.ground_truth = [GroundTruthObject.build(image_id, BoundingBox(100, 350, 190, 480), 2)]
    scene.attach_detections([make_detection(image_id, 0, (100, 350, 190, 480), "orange", 0.9)])
    return cats, scene


class TestOracleReview:
    def test_flags_mislabel_with_truth_suggestion(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=1, flag_accuracy=1.0, false_flag_rate=0.0)
        verdicts = oracle_review(scene, cats, cfg)
        assert verdicts[0].judgment == "unreasonable"
        assert verdicts[0].suspected_label == "moon"

    def test_inert_oracle_flags_nothing(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=1, flag_accuracy=0.0, false_flag_rate=0.0)
        assert all(v.judgment == "reasonable" for v in oracle_review(scene, cats, cfg))

    def test_missing_ground_truth_is_an_error(self):
        cats, scene = scene_with_mislabel()
        scene.ground_truth = []
        with pytest.raises(OracleUnavailableError):
            oracle_review(scene, cats, OracleConfig(seed=1))

    def test_monte_carlo_flag_rate(self):
        cats = two_cat_map()
        cfg = OracleConfig(seed=99, flag_accuracy=0.5, false_flag_rate=0.0)
        flagged = total = 0
        for image_id in range(1, 1001):
            scene = SceneRecord(image_id=image_id, width=640.0, height=480.0)
            scene.ground_truth = [
                GroundTruthObject.build(image_id, BoundingBox(k * 30, 0, k * 30 + 20, 20), 2)
                for k in range(10)
            ]
            scene.attach_detections(
                [
                    make_detection(image_id, k, (k * 30, 0, k * 30 + 20, 20), "orange", 0.9)
                    for k in range(10)
                ]
            )
            for v in oracle_review(scene, cats, cfg):
                total += 1
                flagged += v.judgment == "unreasonable"
        assert total == 10_000
        assert abs(flagged / total - 0.5) < 0.02

    def test_determinism_function_of_ids(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=7, flag_accuracy=0.5)
        first = oracle_review(scene, cats, cfg)
        second = oracle_review(scene, cats, cfg)
        assert first == second


class TestOracleClassify:
    def test_perfect_classifier_returns_truth(self):
        cats, scene = scene_with_mislabel()
        det = scene.detections[0]
        cfg = OracleConfig(seed=1, classifier_accuracy=1.0)
        assert oracle_classify(scene, det, ["orange", "moon"], cats, cfg) == ("moon", 1.0)

    def test_forced_error_picks_the_wrong_candidate(self):
        cats, scene = scene_with_mislabel()
        det = scene.detections[0]
        cfg = OracleConfig(seed=1, classifier_accuracy=0.0)
        label, conf = oracle_classify(scene, det, ["moon", "other"], cats, cfg)
        assert label == "other" and conf == 0.5

    def test_no_gt_match_returns_unknown(self):
        cats, scene = scene_with_mislabel()
        lost = make_detection(scene.image_id, 3, (0, 0, 10, 10), "orange", 0.9)
        cfg = OracleConfig(seed=1)
        assert oracle_classify(scene, lost, ["moon"], cats, cfg) == ("unknown", 0.0)

    def test_repeatable(self):
        cats, scene = scene_with_mislabel()
        det = scene.detections[0]
        cfg = OracleConfig(seed=5, classifier_accuracy=0.4)
        candidates = ["orange", "moon", "kite", "dog"]
        outputs = {oracle_classify(scene, det, candidates, cats, cfg) for _ in range(10)}
        assert len(outputs) == 1


class TestUnitUniform:
    def test_range_and_determinism(self):
        values = [unit_uniform(1, i, "review") for i in range(1000)]
        assert all(0.0 <= v < 1.0 for v in values)
        assert values == [unit_uniform(1, i, "review") for i in range(1000)]
        assert abs(sum(values) / len(values) - 0.5) < 0.05

    def test_independent_of_order(self):
        a = unit_uniform(3, 14, 2, "classify")
        b = unit_uniform(3, 14, 2, "classify")
        assert a == b


class TestInjectLabelNoise:
    def build_scenes(self, n_images=50, per_image=10):
        cats = CategoryMap([Category(k + 1, f"c{k}") for k in range(5)])
        scenes = []
        for image_id in range(1, n_images + 1):
            scene = SceneRecord(image_id=image_id, width=1000.0, height=100.0)
            for k in range(per_image):
                box = BoundingBox(k * 40, 0, k * 40 + 30, 30)
                scene.ground_truth.append(
                    GroundTruthObject.build(image_id, box, (k % 5) + 1)
                )
            scene.attach_detections(
                [
                    make_detection(image_id, k, (k * 40, 0, k * 40 + 30, 30), f"c{k % 5}", 1.0)
                    for k in range(per_image)
                ]
            )
            scenes.append(scene)
        return cats, scenes

    def test_rate_zero_changes_nothing(self):
        cats, scenes = self.build_scenes(5)
        before = [[d.label for d in s.detections] for s in scenes]
        manifest = inject_label_noise(scenes, 0.0, 1, cats)
        assert manifest == []
        assert [[d.label for d in s.detections] for s in scenes] == before

    def test_rate_one_corrupts_every_correct_label(self):
        cats, scenes = self.build_scenes(5)
        manifest = inject_label_noise(scenes, 1.0, 1, cats)
        assert len(manifest) == sum(len(s.detections) for s in scenes)
        for scene in scenes:
            for det, gt in zip(scene.detections, scene.ground_truth):
                assert det.label != f"c{gt.category_id - 1}"

    def test_rate_invalid(self):
        cats, scenes = self.build_scenes(1)
        with pytest.raises(ValidationError):
            inject_label_noise(scenes, 1.5, 1, cats)

    def test_monte_carlo_rate(self):
        cats, scenes = self.build_scenes(500, 10)  # 5000 detections
        manifest = inject_label_noise(scenes, 0.1, 42, cats)
        # binomial(5000, 0.1): 99% bounds ~ 500 +/- 2.58*sqrt(450)
        margin = 2.58 * math.sqrt(5000 * 0.1 * 0.9)
        assert abs(len(manifest) - 500) <= margin

    def test_manifest_entries_describe_actual_changes(self):
        cats, scenes = self.build_scenes(10)
        manifest = inject_label_noise(scenes, 0.5, 3, cats)
        by_id = {d.det_id: d for s in scenes for d in s.detections}
        for item in manifest:
            assert by_id[item["det_id"]].label == item["new"]
            assert item["old"] != item["new"]

    def test_boxes_untouched(self):
        cats, scenes = self.build_scenes(5)
        before = [[d.box for d in s.detections] for s in scenes]
        inject_label_noise(scenes, 1.0, 1, cats)
        assert [[d.box for d in s.detections] for s in scenes] == before


class TestScripts:
    def test_linguistic_script_matches_direct_oracle(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=11, flag_accuracy=1.0)
        script = oracle_linguistic_script({scene.image_id: scene}, cats, cfg)
        caption = script("Generate a contextual image caption for image id 1: short.")
        assert "(image 1)" in caption
        prompt = build_review_prompt(caption, scene.detections)
        verdicts = parse_verdicts(script(prompt.rendered), scene.detections)
        assert verdicts == oracle_review(scene, cats, cfg)

    def test_linguistic_script_free_text_mode(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=11, flag_accuracy=1.0)
        script = oracle_linguistic_script({scene.image_id: scene}, cats, cfg, MODE_FREE_TEXT)
        caption = script("Generate a contextual image caption for image id 1: short.")
        prompt = build_review_prompt(caption, scene.detections, MODE_FREE_TEXT)
        response = script(prompt.rendered)
        assert "Orange detection is unreasonable" in response
        verdicts = parse_verdicts(response, scene.detections, MODE_FREE_TEXT)
        assert verdicts[0].judgment == "unreasonable"
        assert verdicts[0].suspected_label == "moon"

    def test_classifier_script_wire(self):
        cats, scene = scene_with_mislabel()
        cfg = OracleConfig(seed=11)
        script = oracle_classifier_script({scene.image_id: scene}, cats, cfg)
        wire = {
            "image_id": 1,
            "det_id": scene.detections[0].det_id,
            "region": [100, 350, 190, 480],
            "candidates": ["orange", "moon"],
        }
        assert script(wire) == {"label": "moon", "confidence": 1.0}


class TestBestGtMatch:
    def test_crowds_excluded(self):
        cats = two_cat_map()
        scene = SceneRecord(image_id=1, width=100.0, height=100.0)
        scene.ground_truth = [
            GroundTruthObject.build(1, BoundingBox(0, 0, 50, 50), 1, iscrowd=True),
        ]
        assert best_gt_match(scene, BoundingBox(0, 0, 50, 50), 0.5) is None

    def test_highest_iou_wins(self):
        scene = SceneRecord(image_id=1, width=100.0, height=100.0)
        scene.ground_truth = [
            GroundTruthObject.build(1, BoundingBox(0, 0, 40, 40), 1),
            GroundTruthObject.build(1, BoundingBox(0, 0, 50, 50), 2),
        ]
        match = best_gt_match(scene, BoundingBox(0, 0, 50, 50), 0.5)
        assert match.category_id == 2
