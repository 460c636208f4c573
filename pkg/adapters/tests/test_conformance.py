"""Adapter conformance: every endpoint's responses must pass the pipeline
CLI's protocol validator with zero violations, using stubbed models."""

import json

import requests

from .conftest import envelope, validate_transcript


def test_all_adapter_endpoints_conform(tmp_path, detector_server, classifier_server):
    records = []
    seq = 0
    for image_id in (1, 2, 3, 50):
        request = {"image_id": image_id, "image_ref": f"img{image_id}.jpg"}
        response = requests.post(f"{detector_server}/detect", json=request, timeout=5).json()
        records.append(envelope("detector", request, response, seq))
        seq += 1
    for candidates in (["orange", "moon"], ["dog", "horse", "cow"], ["kite"]):
        request = {
            "image_id": 1,
            "image_ref": "img1.jpg",
            "det_id": seq,
            "region": [10, 10, 60, 60],
            "candidates": candidates,
        }
        response = requests.post(
            f"{classifier_server}/classify", json=request, timeout=5
        ).json()
        records.append(envelope("classifier", request, response, seq))
        seq += 1

    proc = validate_transcript(tmp_path, records)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    report = json.loads(proc.stdout)
    assert report["violations"] == []
    assert report["checked"] == len(records)
    print(f"ACCEPTANCE 9: PASS ({len(records)} adapter envelopes, zero violations)")
