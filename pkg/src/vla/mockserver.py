"""HTTP server exposing the oracle agents over the gateway wire schemas.

Serves all three roles from one port so the HTTP transports can be
integration-tested without any model:

- ``POST /detect``                 detections for an image id
- ``POST /classify``               oracle region classification
- ``POST /v1/chat/completions``    oracle captions and review verdicts
- ``GET  /healthz``                liveness probe
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .coco_io import load_coco_annotations
from .errors import VlaError
from .oracle import OracleConfig, oracle_classifier_script, oracle_linguistic_script
from .protocol import MODE_STRUCTURED

log = logging.getLogger(__name__)


class MockAgentService:
    def __init__(
        self,
        annotations_path,
        detections_path,
        oracle_cfg: OracleConfig,
        mode: str = MODE_STRUCTURED,
    ):
        cats, scenes = load_coco_annotations(annotations_path)
        scenes_by_id = {s.image_id: s for s in scenes}
        self.linguistic = oracle_linguistic_script(scenes_by_id, cats, oracle_cfg, mode)
        self.classifier = oracle_classifier_script(scenes_by_id, cats, oracle_cfg)
        self.detections_by_image: dict[int, list[dict]] = {}
        for entry in json.loads(Path(detections_path).read_text(encoding="utf-8")):
            self.detections_by_image.setdefault(int(entry["image_id"]), []).append(entry)

    def detect(self, body: dict) -> list[dict]:
        return self.detections_by_image.get(int(body["image_id"]), [])

    def classify(self, body: dict) -> dict:
        return self.classifier(body)

    def chat(self, body: dict) -> dict:
        messages = body["messages"]
        content = messages[-1]["content"]
        reply = self.linguistic(content)
        return {
            "object": "chat.completion",
            "model": body.get("model") or "oracle",
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": reply},
                    "finish_reason": "stop",
                }
            ],
        }


def _make_handler(service: MockAgentService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("mock server: " + fmt, *args)

        def _send(self, status: int, payload) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, {"status": "ok"})
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                self._send(400, {"error": "request body is not valid JSON"})
                return
            try:
                if self.path == "/detect":
                    self._send(200, service.detect(body))
                elif self.path == "/classify":
                    self._send(200, service.classify(body))
                elif self.path == "/v1/chat/completions":
                    self._send(200, service.chat(body))
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except (KeyError, TypeError, ValueError) as exc:
                self._send(400, {"error": f"malformed request: {exc}"})
            except VlaError as exc:
                self._send(422, {"error": str(exc)})

    return Handler


def serve_mock(
    annotations_path,
    detections_path,
    oracle_cfg: OracleConfig,
    host: str = "127.0.0.1",
    port: int = 0,
    mode: str = MODE_STRUCTURED,
) -> ThreadingHTTPServer:
    """Start the mock agent server on a background thread; returns the server."""
    service = MockAgentService(annotations_path, detections_path, oracle_cfg, mode)
    server = ThreadingHTTPServer((host, port), _make_handler(service))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
