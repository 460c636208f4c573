from __future__ import annotations

import json
import subprocess
import sys

import pytest

from vla_adapters.config import AdapterConfig
from vla_adapters.servers import serve_classifier, serve_detector


def base_url(server) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}"


@pytest.fixture
def detector_server():
    server = serve_detector(AdapterConfig(role="detector"))
    yield base_url(server)
    server.shutdown()


@pytest.fixture
def classifier_server():
    server = serve_classifier(AdapterConfig(role="classifier"))
    yield base_url(server)
    server.shutdown()


def envelope(role: str, request: dict, response, seq: int) -> dict:
    """An AgentEnvelope record in the pipeline's published transcript schema."""
    return {
        "request_id": f"adapter-test/{seq}",
        "role": role,
        "attempt": 1,
        "request": request,
        "response": response,
        "requested_at": seq * 2,
        "responded_at": seq * 2 + 1,
        "status": "ok",
        "error": None,
    }


def validate_transcript(tmp_path, records: list[dict]) -> subprocess.CompletedProcess:
    """Run the pipeline CLI's protocol validator over envelope records."""
    transcript = tmp_path / "transcript.jsonl"
    transcript.write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
    )
    return subprocess.run(
        [sys.executable, "-m", "vla.cli", "validate-protocol", str(transcript), "--json"],
        capture_output=True,
        text=True,
    )
