import json

import pytest
import requests

from vla.gateway import (
    ROLE_CLASSIFIER,
    ROLE_DETECTOR,
    ROLE_LINGUISTIC,
    AgentEndpointConfig,
    AgentGateway,
    EnvelopeRecorder,
)
from vla.oracle import OracleConfig
from vla.mockserver import serve_mock
from vla.pipeline import RunConfig, run_pipeline

from .test_pipeline import SKY_DETS, write_sky


@pytest.fixture
def sky_server(tmp_path):
    ann, det = write_sky(tmp_path)
    server = serve_mock(ann, det, OracleConfig(seed=7))
    host, port = server.server_address[:2]
    yield f"http://{host}:{port}", ann, det
    server.shutdown()


def http_endpoints(base_url):
    return {
        ROLE_DETECTOR: AgentEndpointConfig(
            role=ROLE_DETECTOR, transport="http-vision", base_url=base_url
        ),
        ROLE_LINGUISTIC: AgentEndpointConfig(
            role=ROLE_LINGUISTIC, transport="http-chat", base_url=base_url, model="oracle"
        ),
        ROLE_CLASSIFIER: AgentEndpointConfig(
            role=ROLE_CLASSIFIER, transport="http-vision", base_url=base_url
        ),
    }


class TestServeMock:
    def test_healthz(self, sky_server):
        base, _, _ = sky_server
        assert requests.get(f"{base}/healthz", timeout=5).json() == {"status": "ok"}

    def test_detect_endpoint(self, sky_server):
        base, _, _ = sky_server
        got = requests.post(f"{base}/detect", json={"image_id": 1}, timeout=5).json()
        assert got == SKY_DETS
        empty = requests.post(f"{base}/detect", json={"image_id": 99}, timeout=5).json()
        assert empty == []

    def test_malformed_body_is_400(self, sky_server):
        base, _, _ = sky_server
        resp = requests.post(
            f"{base}/classify", data=b"{not json", headers={"Content-Type": "application/json"},
            timeout=5,
        )
        assert resp.status_code == 400

    def test_unknown_path_is_404(self, sky_server):
        base, _, _ = sky_server
        assert requests.post(f"{base}/nope", json={}, timeout=5).status_code == 404

    def test_classify_endpoint(self, sky_server):
        base, _, _ = sky_server
        body = {
            "image_id": 1,
            "det_id": 10000001,
            "region": [100, 350, 190, 480],
            "candidates": ["orange", "moon"],
        }
        got = requests.post(f"{base}/classify", json=body, timeout=5).json()
        assert got == {"label": "moon", "confidence": 1.0}


class TestHttpPipeline:
    def test_full_run_over_http_matches_in_process(self, tmp_path, sky_server, monkeypatch):
        base, ann, det = sky_server
        monkeypatch.setenv("VLA_LINGUISTIC_API_KEY", "local")

        cfg_http = RunConfig(
            annotations=str(ann),
            detections=str(det),
            output_dir=str(tmp_path / "out-http"),
            seed=7,
            endpoints=http_endpoints(base),
            scoring_vocabulary=["airplane", "orange"],
        )
        scenes_http, summary_http = run_pipeline(cfg_http)

        cfg_mock = RunConfig(
            annotations=str(ann),
            detections=str(det),
            output_dir=str(tmp_path / "out-mock"),
            seed=7,
            scoring_vocabulary=["airplane", "orange"],
        )
        scenes_mock, summary_mock = run_pipeline(cfg_mock)

        assert [d.label for d in scenes_http[0].corrected] == [
            d.label for d in scenes_mock[0].corrected
        ]
        assert (
            json.loads(cfg_http.results_path.read_text())
            == json.loads(cfg_mock.results_path.read_text())
        )
        for key in ("flagged", "relabeled", "detections", "written_results"):
            assert summary_http[key] == summary_mock[key]

    def test_http_transcript_validates(self, tmp_path, sky_server, monkeypatch):
        from vla.cli import main

        base, ann, det = sky_server
        monkeypatch.setenv("VLA_LINGUISTIC_API_KEY", "local")
        cfg = RunConfig(
            annotations=str(ann),
            detections=str(det),
            output_dir=str(tmp_path / "out"),
            seed=7,
            endpoints=http_endpoints(base),
            scoring_vocabulary=["airplane", "orange"],
        )
        run_pipeline(cfg)
        assert main(["validate-protocol", str(cfg.transcript_path)]) == 0


class TestGatewayAgainstServer:
    def test_detect_chat_classify_cycle(self, tmp_path, sky_server, monkeypatch):
        from vla.coco_io import load_coco_annotations
        from vla.protocol import build_caption_request, build_review_prompt, parse_verdicts

        base, ann, det = sky_server
        monkeypatch.setenv("VLA_LINGUISTIC_API_KEY", "local")
        cats, scenes = load_coco_annotations(ann)
        cats.restrict_vocabulary(["airplane", "orange"])
        scene = scenes[0]
        gw = AgentGateway(http_endpoints(base))
        rec = EnvelopeRecorder("img1")
        dets = gw.detect(scene, cats, rec)
        scene.attach_detections(dets)
        caption = gw.chat(build_caption_request(scene), rec)
        assert "(image 1)" in caption
        prompt = build_review_prompt(caption, scene.detections)
        verdicts = parse_verdicts(gw.chat(prompt.rendered, rec), scene.detections)
        assert [v.judgment for v in verdicts] == ["reasonable", "unreasonable"]
        assert verdicts[1].suspected_label == "moon"
