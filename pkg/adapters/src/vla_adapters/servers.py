"""The three adapter HTTP servers.

Every server exposes GET /healthz and exactly one POST endpoint matching
the pipeline gateway's wire schema for its role. Inference is serialized
through a lock sized by max_batch_size=1 semantics; stubs are stateless
anyway, and nothing is shared between requests.
"""

from __future__ import annotations

import json
import math
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from .backends import load_classifier, load_detector
from .config import AdapterConfig, AdapterError


class _JsonHandler(BaseHTTPRequestHandler):
    service = None  # injected by subclass factory

    def log_message(self, fmt, *args):
        pass

    def send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def read_json(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            return json.loads(self.rfile.read(length) or b"")
        except (ValueError, json.JSONDecodeError):
            return None

    def do_GET(self):
        if self.path == "/healthz":
            self.send_json(200, {"status": "ok", "role": self.service.role})
        else:
            self.send_json(404, {"error": f"unknown path {self.path}"})


def _start(handler_cls, cfg: AdapterConfig) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((cfg.host, cfg.port), handler_cls)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


# -- detector ----------------------------------------------------------------


def serve_detector(cfg: AdapterConfig) -> ThreadingHTTPServer:
    model = load_detector(cfg)  # refuses to start on load failure
    lock = threading.Lock()

    class Service:
        role = "detector"

    class Handler(_JsonHandler):
        service = Service

        def do_POST(self):
            if self.path != "/detect":
                self.send_json(404, {"error": f"unknown path {self.path}"})
                return
            body = self.read_json()
            if not isinstance(body, dict) or "image_id" not in body:
                self.send_json(400, {"error": "body must be {image_id, image_ref?}"})
                return
            try:
                image_id = int(body["image_id"])
            except (TypeError, ValueError):
                self.send_json(400, {"error": "image_id must be an integer"})
                return
            with lock:
                entries = model.detect(image_id, body.get("image_ref"))
            self.send_json(200, entries)

    return _start(Handler, cfg)


# -- classifier ----------------------------------------------------------------


def _valid_region(region) -> bool:
    if not (isinstance(region, list) and len(region) == 4):
        return False
    try:
        x1, y1, x2, y2 = (float(v) for v in region)
    except (TypeError, ValueError):
        return False
    if any(not math.isfinite(v) for v in (x1, y1, x2, y2)):
        return False
    # outside-image regions: negative corners or inverted boxes
    return 0 <= x1 <= x2 and 0 <= y1 <= y2


def serve_classifier(cfg: AdapterConfig) -> ThreadingHTTPServer:
    model = load_classifier(cfg)
    lock = threading.Lock()

    class Service:
        role = "classifier"

    class Handler(_JsonHandler):
        service = Service

        def do_POST(self):
            if self.path != "/classify":
                self.send_json(404, {"error": f"unknown path {self.path}"})
                return
            body = self.read_json()
            if not isinstance(body, dict):
                self.send_json(400, {"error": "body must be a JSON object"})
                return
            candidates = body.get("candidates")
            if not (isinstance(candidates, list) and candidates
                    and all(isinstance(c, str) for c in candidates)):
                self.send_json(400, {"error": "candidates must be a non-empty string array"})
                return
            if not _valid_region(body.get("region")):
                self.send_json(400, {"error": "region outside image"})
                return
            with lock:
                label, confidence = model.classify(
                    body.get("image_ref") or body.get("image_id"),
                    body["region"],
                    candidates,
                )
            self.send_json(200, {"label": label, "confidence": confidence})

    return _start(Handler, cfg)


# -- linguistic passthrough ----------------------------------------------------


def _to_vendor_request(vendor: str, body: dict) -> dict:
    messages = body.get("messages", [])
    if vendor == "openai":
        return body
    if vendor == "anthropic":
        return {
            "model": body.get("model"),
            "max_tokens": body.get("max_tokens", 1024),
            "messages": messages,
        }
    if vendor == "gemini":
        return {
            "contents": [
                {"role": m.get("role", "user"), "parts": [{"text": m.get("content", "")}]}
                for m in messages
            ]
        }
    raise AdapterError(f"unknown upstream vendor {vendor!r}")


def _from_vendor_response(vendor: str, data: dict, model: str | None) -> dict:
    if vendor == "openai":
        return data
    if vendor == "anthropic":
        text = "".join(
            part.get("text", "") for part in data.get("content", []) if isinstance(part, dict)
        )
    elif vendor == "gemini":
        candidates = data.get("candidates") or [{}]
        parts = candidates[0].get("content", {}).get("parts", [])
        text = "".join(p.get("text", "") for p in parts)
    else:
        raise AdapterError(f"unknown upstream vendor {vendor!r}")
    return {
        "object": "chat.completion",
        "model": model or data.get("model"),
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }
        ],
    }


def serve_linguistic_passthrough(cfg: AdapterConfig) -> ThreadingHTTPServer:
    session = requests.Session()

    class Service:
        role = "linguistic"

    class Handler(_JsonHandler):
        service = Service

        def do_POST(self):
            if self.path != "/v1/chat/completions":
                self.send_json(404, {"error": f"unknown path {self.path}"})
                return
            body = self.read_json()
            if not isinstance(body, dict) or not isinstance(body.get("messages"), list):
                self.send_json(400, {"error": "body must carry a messages array"})
                return
            headers = {"Content-Type": "application/json"}
            key = os.environ.get(cfg.upstream_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
            try:
                upstream = session.post(
                    cfg.upstream_base.rstrip("/") + "/",
                    json=_to_vendor_request(cfg.upstream_vendor, body),
                    headers=headers,
                    timeout=60,
                )
            except requests.RequestException as exc:
                self.send_json(502, {"error": f"upstream unreachable: {exc}"})
                return
            if upstream.status_code >= 400:
                # propagate the status with the vendor body attached
                try:
                    vendor_body = upstream.json()
                except ValueError:
                    vendor_body = upstream.text
                self.send_json(upstream.status_code, {"error": "upstream error",
                                                      "upstream": vendor_body})
                return
            try:
                data = upstream.json()
            except ValueError:
                self.send_json(502, {"error": "upstream returned non-JSON"})
                return
            self.send_json(
                200, _from_vendor_response(cfg.upstream_vendor, data, body.get("model"))
            )

    return _start(Handler, cfg)


def serve(cfg: AdapterConfig) -> ThreadingHTTPServer:
    if cfg.role == "detector":
        return serve_detector(cfg)
    if cfg.role == "classifier":
        return serve_classifier(cfg)
    return serve_linguistic_passthrough(cfg)
