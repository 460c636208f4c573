import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vla.errors import EmptyInputError, ProtocolError, ValidationError
from vla.model import SceneRecord
from vla.protocol import (
    CLOSING_QUESTION,
    MODE_FREE_TEXT,
    MODE_STRUCTURED,
    PromptTemplates,
    Verdict,
    build_caption_request,
    build_classification_request,
    build_review_prompt,
    parse_verdicts,
    render_structured_verdicts,
    round_half_away,
)

from .conftest import make_detection


@pytest.fixture
def sky_dets(sky_scene):
    return sky_scene.detections


class TestCaptionRequest:
    def test_deterministic(self, sky_scene):
        assert build_caption_request(sky_scene) == build_caption_request(sky_scene)

    def test_mentions_image_and_sentence_budget(self, sky_scene):
        req = build_caption_request(sky_scene)
        assert "image id 7" in req
        assert "sky.jpg" in req
        assert "one to three sentences" in req

    def test_valid_without_detections(self):
        scene = SceneRecord(image_id=3, width=10.0, height=10.0)
        assert "image id 3" in build_caption_request(scene)


class TestReviewPrompt:
    def test_contains_reference_lines_and_question(self, sky_dets, sky_scene):
        prompt = build_review_prompt(sky_scene.caption or "caption", sky_dets)
        assert "Airplane, coordinates: (320, 49), (640, 150)" in prompt.rendered
        assert "Orange, coordinates: (100, 350), (190, 480)" in prompt.rendered
        assert CLOSING_QUESTION in prompt.rendered
        assert "The object detector identified the following objects:" in prompt.rendered

    def test_single_detection(self, sky_dets):
        prompt = build_review_prompt("c", sky_dets[:1])
        assert prompt.rendered.count("coordinates:") == 1
        assert CLOSING_QUESTION in prompt.rendered

    def test_order_preserved(self, sky_dets):
        prompt = build_review_prompt("c", sky_dets)
        assert [line[0] for line in prompt.detection_lines] == [d.det_id for d in sky_dets]

    def test_half_away_rounding(self):
        det = make_detection(1, 0, (100.4, 350.6, 200.5, 400.49), "orange", 0.5)
        prompt = build_review_prompt("c", [det])
        assert "(100, 351), (201, 400)" in prompt.rendered

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            build_review_prompt("c", [])

    def test_structured_directive_lists_ids(self, sky_dets):
        prompt = build_review_prompt("c", sky_dets, MODE_STRUCTURED)
        for det in sky_dets:
            assert str(det.det_id) in prompt.rendered
        assert '"det_id"' in prompt.rendered

    def test_free_text_mode_has_no_json_directive(self, sky_dets):
        prompt = build_review_prompt("c", sky_dets, MODE_FREE_TEXT)
        assert '"det_id"' not in prompt.rendered

    def test_scores_omitted_by_default_included_on_request(self, sky_dets):
        default = build_review_prompt("c", sky_dets)
        scored = build_review_prompt("c", sky_dets, include_scores=True)
        assert "confidence" not in default.rendered.split(CLOSING_QUESTION)[0]
        assert "confidence: 0.95" in scored.rendered

    def test_byte_determinism(self, sky_dets):
        a = build_review_prompt("same caption", sky_dets)
        b = build_review_prompt("same caption", sky_dets)
        assert a.rendered == b.rendered

    def test_template_override(self, tmp_path, sky_dets):
        path = tmp_path / "templates.json"
        path.write_text(json.dumps({"review_header": "Objects found:"}), encoding="utf-8")
        prompt = build_review_prompt("c", sky_dets, templates=PromptTemplates.load(path))
        assert "Objects found:" in prompt.rendered
        assert CLOSING_QUESTION in prompt.rendered

    def test_unknown_template_key_rejected(self, tmp_path):
        path = tmp_path / "templates.json"
        path.write_text(json.dumps({"nope": "x"}), encoding="utf-8")
        with pytest.raises(ValidationError):
            PromptTemplates.load(path)


class TestRounding:
    @pytest.mark.parametrize(
        "value,expected",
        [(100.4, 100), (350.6, 351), (0.5, 1), (1.5, 2), (-0.5, -1), (-1.5, -2), (2.0, 2)],
    )
    def test_half_away_from_zero(self, value, expected):
        assert round_half_away(value) == expected


class TestParseFreeText:
    def test_reference_example(self, sky_dets):
        response = (
            "Airplane detection is reasonable. "
            "Orange detection is unreasonable, as the object is likely the moon"
        )
        verdicts = parse_verdicts(response, sky_dets, MODE_FREE_TEXT)
        assert len(verdicts) == 2
        airplane, orange = verdicts
        assert airplane.det_id == sky_dets[0].det_id and airplane.judgment == "reasonable"
        assert orange.det_id == sky_dets[1].det_id and orange.judgment == "unreasonable"
        assert orange.suspected_label == "moon"

    def test_unmentioned_defaults_reasonable(self, sky_dets):
        verdicts = parse_verdicts("Nothing to report here.", sky_dets, MODE_FREE_TEXT)
        assert all(v.judgment == "reasonable" for v in verdicts)
        assert len(verdicts) == len(sky_dets)

    def test_duplicate_labels_tie_broken_by_order(self):
        dets = [
            make_detection(1, 0, (0, 0, 10, 10), "orange", 0.9),
            make_detection(1, 1, (20, 20, 30, 30), "orange", 0.8),
        ]
        verdicts = parse_verdicts("Orange detection is unreasonable.", dets, MODE_FREE_TEXT)
        assert verdicts[0].judgment == "unreasonable"
        assert verdicts[1].judgment == "reasonable"

    def test_case_insensitive_matching(self, sky_dets):
        verdicts = parse_verdicts("AIRPLANE detection is UNREASONABLE.", sky_dets, MODE_FREE_TEXT)
        assert verdicts[0].judgment == "unreasonable"

    def test_empty_response_rejected(self, sky_dets):
        with pytest.raises(ProtocolError):
            parse_verdicts("   ", sky_dets, MODE_FREE_TEXT)


class TestParseStructured:
    def test_round_trip_identity(self, sky_dets):
        verdicts = [
            Verdict(det_id=sky_dets[0].det_id, judgment="reasonable"),
            Verdict(
                det_id=sky_dets[1].det_id,
                judgment="unreasonable",
                suspected_label="moon",
                rationale="looks like the moon",
            ),
        ]
        assert parse_verdicts(render_structured_verdicts(verdicts), sky_dets) == verdicts

    def test_permuted_response_reassociated(self, sky_dets):
        verdicts = [
            Verdict(det_id=sky_dets[1].det_id, judgment="unreasonable", suspected_label="moon"),
            Verdict(det_id=sky_dets[0].det_id, judgment="reasonable"),
        ]
        parsed = parse_verdicts(render_structured_verdicts(verdicts), sky_dets)
        assert [v.det_id for v in parsed] == [d.det_id for d in sky_dets]

    def test_missing_detection_defaults_reasonable(self, sky_dets):
        only_second = [Verdict(det_id=sky_dets[1].det_id, judgment="unreasonable")]
        parsed = parse_verdicts(render_structured_verdicts(only_second), sky_dets)
        assert parsed[0].judgment == "reasonable"
        assert parsed[1].judgment == "unreasonable"

    def test_markdown_fenced_json_accepted(self, sky_dets):
        body = render_structured_verdicts(
            [Verdict(det_id=d.det_id, judgment="reasonable") for d in sky_dets]
        )
        parsed = parse_verdicts(f"```json\n{body}\n```", sky_dets)
        assert len(parsed) == 2

    def test_unparseable_json_carries_raw_response(self, sky_dets):
        with pytest.raises(ProtocolError) as err:
            parse_verdicts("not json at all", sky_dets)
        assert err.value.raw_response == "not json at all"

    def test_duplicate_det_id_rejected(self, sky_dets):
        dup = json.dumps(
            [
                {"det_id": sky_dets[0].det_id, "judgment": "reasonable"},
                {"det_id": sky_dets[0].det_id, "judgment": "unreasonable"},
            ]
        )
        with pytest.raises(ProtocolError, match="duplicate"):
            parse_verdicts(dup, sky_dets)

    def test_unknown_det_id_rejected(self, sky_dets):
        body = json.dumps([{"det_id": 424242, "judgment": "reasonable"}])
        with pytest.raises(ProtocolError, match="unknown det_id"):
            parse_verdicts(body, sky_dets)

    def test_bad_judgment_rejected(self, sky_dets):
        body = json.dumps([{"det_id": sky_dets[0].det_id, "judgment": "maybe"}])
        with pytest.raises(ProtocolError, match="maybe"):
            parse_verdicts(body, sky_dets)

    def test_suspected_label_nulled_on_reasonable(self, sky_dets):
        body = json.dumps(
            [{"det_id": sky_dets[0].det_id, "judgment": "reasonable", "suspected_label": "moon"}]
        )
        parsed = parse_verdicts(body, sky_dets)
        assert parsed[0].suspected_label is None


class TestVerdictInvariant:
    def test_suspected_only_when_unreasonable(self):
        with pytest.raises(ValidationError):
            Verdict(det_id=1, judgment="reasonable", suspected_label="moon")


labels = st.sampled_from(["airplane", "orange", "moon", "dog", "kite", "traffic light"])


@st.composite
def verdict_lists(draw):
    n = draw(st.integers(1, 8))
    ids = draw(st.lists(st.integers(0, 10**9), min_size=n, max_size=n, unique=True))
    out = []
    for det_id in ids:
        judgment = draw(st.sampled_from(["reasonable", "unreasonable"]))
        suspected = (
            draw(st.one_of(st.none(), labels)) if judgment == "unreasonable" else None
        )
        rationale = draw(st.text(max_size=30).filter(lambda s: "\x00" not in s))
        out.append(
            Verdict(det_id=det_id, judgment=judgment, suspected_label=suspected, rationale=rationale)
        )
    return out


@settings(max_examples=200)
@given(verdict_lists())
def test_structured_round_trip_property(verdicts):
    dets = [
        make_detection(1, k, (k * 10, 0, k * 10 + 5, 5), "orange", 0.5)
        for k in range(len(verdicts))
    ]
    # retarget ids so verdicts refer to these detections
    verdicts = [
        Verdict(
            det_id=d.det_id,
            judgment=v.judgment,
            suspected_label=v.suspected_label,
            rationale=v.rationale,
        )
        for d, v in zip(dets, verdicts)
    ]
    assert parse_verdicts(render_structured_verdicts(verdicts), dets) == verdicts


class TestClassificationRequest:
    def test_reference_region_and_suspected_candidate(self, sky_scene, sky_cats):
        det = sky_scene.detections[1]
        req = build_classification_request(
            sky_scene, det, sky_cats.vocabulary_names() + ["moon"]
        )
        assert req.region == det.box
        assert (req.region.x1, req.region.y1, req.region.x2, req.region.y2) == (100, 350, 190, 480)
        assert "moon" in req.candidates
        assert req.image_id == sky_scene.image_id

    def test_without_suspected_label(self, sky_scene, sky_cats):
        det = sky_scene.detections[1]
        req = build_classification_request(sky_scene, det, sky_cats.vocabulary_names())
        assert req.candidates == ("airplane", "orange")

    def test_candidates_deduplicated(self, sky_scene):
        det = sky_scene.detections[1]
        req = build_classification_request(sky_scene, det, ["orange", "Orange ", "moon", "moon"])
        assert req.candidates == ("orange", "moon")

    def test_wire_shape(self, sky_scene):
        det = sky_scene.detections[1]
        wire = build_classification_request(sky_scene, det, ["moon"]).to_wire()
        assert wire["region"] == [100.0, 350.0, 190.0, 480.0]
        assert wire["det_id"] == det.det_id
        assert wire["candidates"] == ["moon"]
