"""Client-side contracts for the three agent roles.

Transports:

- ``http-chat``: chat-completions shape, POST <base>/v1/chat/completions
- ``http-vision``: POST <base>/detect and POST <base>/classify
- ``file``: detections served from a precomputed COCO results file
- ``mock``: an in-process callable, for tests and oracle runs

Every attempt of every call is recorded as an AgentEnvelope; a run's
transcript is the JSON-lines serialization of those envelopes. With file
or mock transports the envelope timing fields are logical sequence
numbers, so transcripts are byte-stable across runs.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .coco_io import detections_from_entries
from .errors import (
    AgentUnavailableError,
    CredentialError,
    ProtocolError,
    ValidationError,
)
from .model import CategoryMap, Detection, SceneRecord
from .protocol import ClassificationRequest

ROLE_DETECTOR = "detector"
ROLE_LINGUISTIC = "linguistic"
ROLE_CLASSIFIER = "classifier"
ROLES = (ROLE_DETECTOR, ROLE_LINGUISTIC, ROLE_CLASSIFIER)

TRANSPORT_HTTP_CHAT = "http-chat"
TRANSPORT_HTTP_VISION = "http-vision"
TRANSPORT_FILE = "file"
TRANSPORT_MOCK = "mock"

# A classifier may answer this sentinel when it cannot commit to any
# candidate; the pipeline then applies its uncorrectable-detection policy.
UNKNOWN_LABEL = "unknown"

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}
_AUTH_STATUS = {401, 403}


class TransientError(Exception):
    """Raised by mock scripts to exercise the retry path."""


@dataclass
class AgentEndpointConfig:
    role: str
    transport: str
    base_url: str | None = None
    path: str | None = None
    model: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 1.0
    credential_env: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    max_concurrency: int = 4

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown agent role {self.role!r}")
        if self.transport in (TRANSPORT_HTTP_CHAT, TRANSPORT_HTTP_VISION) and not self.base_url:
            raise ValidationError(f"{self.role}: transport {self.transport} requires a base URL")
        if self.transport == TRANSPORT_FILE and not self.path:
            raise ValidationError(f"{self.role}: file transport requires a path")

    def credential_env_name(self) -> str:
        return self.credential_env or f"VLA_{self.role.upper()}_API_KEY"


@dataclass
class AgentEnvelope:
    request_id: str
    role: str
    attempt: int
    request: dict
    response: object
    requested_at: object
    responded_at: object
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "request_id": self.request_id,
            "role": self.role,
            "attempt": self.attempt,
            "request": self.request,
            "response": self.response,
            "requested_at": self.requested_at,
            "responded_at": self.responded_at,
            "status": self.status,
            "error": self.error,
        }


class EnvelopeRecorder:
    """Collects envelopes for one scope (an image, or a whole run)."""

    def __init__(self, scope: str):
        self.scope = scope
        self.envelopes: list[AgentEnvelope] = []
        self._seq = 0

    def next_request_id(self) -> str:
        rid = f"{self.scope}/{self._seq}"
        self._seq += 1
        return rid

    def tick(self) -> int:
        self._seq += 1
        return self._seq - 1

    def record(self, envelope: AgentEnvelope) -> None:
        self.envelopes.append(envelope)


def _jitter(request_id: str, attempt: int) -> float:
    """Deterministic multiplicative jitter in [0.5, 1.5)."""
    digest = hashlib.sha256(f"{request_id}:{attempt}".encode()).digest()
    return 0.5 + int.from_bytes(digest[:8], "big") / 2**64


def _now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class AgentGateway:
    """Shared client for all three roles. Safe to use from many workers."""

    def __init__(
        self,
        configs: dict[str, AgentEndpointConfig],
        scripts: dict[str, object] | None = None,
        sleep=time.sleep,
    ):
        self.configs = configs
        self.scripts = scripts or {}
        self._sleep = sleep
        self._session = requests.Session()
        self._semaphores = {
            role: threading.Semaphore(cfg.max_concurrency) for role, cfg in configs.items()
        }
        self._file_cache: dict[str, dict[int, list[dict]]] = {}
        self._lock = threading.Lock()
        for role, cfg in configs.items():
            if cfg.transport == TRANSPORT_HTTP_CHAT and not self._api_key(cfg, required=False):
                raise CredentialError(
                    f"{role}: set the {cfg.credential_env_name()} environment variable"
                )

    # -- helpers ---------------------------------------------------------

    def _api_key(self, cfg: AgentEndpointConfig, *, required: bool = True) -> str | None:
        key = os.environ.get(cfg.credential_env_name())
        if not key and required:
            raise CredentialError(
                f"{cfg.role}: set the {cfg.credential_env_name()} environment variable"
            )
        return key

    def _deterministic(self, cfg: AgentEndpointConfig) -> bool:
        return cfg.transport in (TRANSPORT_FILE, TRANSPORT_MOCK)

    def _call(self, cfg, recorder: EnvelopeRecorder, request_payload: dict, fn):
        """Run ``fn`` with retries, recording one envelope per attempt."""
        request_id = recorder.next_request_id()
        deterministic = self._deterministic(cfg)
        last_error: Exception | None = None
        for attempt in range(1, cfg.max_retries + 2):
            requested_at = recorder.tick() if deterministic else _now_iso()
            try:
                with self._semaphores[cfg.role]:
                    response = fn()
            except (TransientError, requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                recorder.record(
                    AgentEnvelope(
                        request_id,
                        cfg.role,
                        attempt,
                        request_payload,
                        None,
                        requested_at,
                        recorder.tick() if deterministic else _now_iso(),
                        status="error",
                        error=str(exc) or exc.__class__.__name__,
                    )
                )
                if attempt <= cfg.max_retries:
                    self._sleep(cfg.backoff_base * 2 ** (attempt - 1) * _jitter(request_id, attempt))
                continue
            recorder.record(
                AgentEnvelope(
                    request_id,
                    cfg.role,
                    attempt,
                    request_payload,
                    response,
                    requested_at,
                    recorder.tick() if deterministic else _now_iso(),
                )
            )
            return response
        raise AgentUnavailableError(
            f"{cfg.role} agent unavailable after {cfg.max_retries + 1} attempts "
            f"({cfg.base_url or cfg.path or cfg.transport}): {last_error}"
        )

    def _http_post(self, cfg: AgentEndpointConfig, url: str, body: dict, *, auth: bool) -> dict:
        headers = {"Content-Type": "application/json"}
        if auth:
            key = self._api_key(cfg)
            headers[cfg.auth_header] = (
                f"{cfg.auth_scheme} {key}" if cfg.auth_scheme else key
            )
        else:
            key = self._api_key(cfg, required=False)
            if key:
                headers[cfg.auth_header] = f"{cfg.auth_scheme} {key}" if cfg.auth_scheme else key
        resp = self._session.post(url, json=body, headers=headers, timeout=cfg.timeout)
        if resp.status_code in _AUTH_STATUS:
            raise CredentialError(f"{cfg.role}: authentication failed ({resp.status_code}) at {url}")
        if resp.status_code in _RETRYABLE_STATUS:
            raise TransientError(f"HTTP {resp.status_code} from {url}")
        if resp.status_code >= 400:
            raise ProtocolError(
                f"{cfg.role}: HTTP {resp.status_code} from {url}", raw_response=resp.text
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{cfg.role}: non-JSON response from {url}", raw_response=resp.text) from exc

    def _file_entries(self, cfg: AgentEndpointConfig) -> dict[int, list[dict]]:
        with self._lock:
            cached = self._file_cache.get(cfg.path)
            if cached is None:
                data = json.loads(Path(cfg.path).read_text(encoding="utf-8"))
                if not isinstance(data, list):
                    raise ProtocolError(f"{cfg.path}: detections file must be a JSON array")
                cached = {}
                for entry in data:
                    cached.setdefault(int(entry["image_id"]), []).append(entry)
                self._file_cache[cfg.path] = cached
            return cached

    # -- operations ------------------------------------------------------

    def detect(self, scene: SceneRecord, cats: CategoryMap, recorder: EnvelopeRecorder) -> list[Detection]:
        cfg = self.configs[ROLE_DETECTOR]
        request = {"image_id": scene.image_id, "image_ref": scene.image_ref}

        if cfg.transport == TRANSPORT_FILE:
            fn = lambda: self._file_entries(cfg).get(scene.image_id, [])
        elif cfg.transport == TRANSPORT_MOCK:
            script = self.scripts[ROLE_DETECTOR]
            fn = lambda: script(scene.image_id)
        elif cfg.transport == TRANSPORT_HTTP_VISION:
            fn = lambda: self._http_post(cfg, f"{cfg.base_url}/detect", request, auth=False)
        else:
            raise ValidationError(f"detector cannot use transport {cfg.transport}")

        entries = self._call(cfg, recorder, request, fn)
        violations = validate_detect_response(entries)
        if violations:
            raise ProtocolError(f"detector response invalid: {violations[0]}", raw_response=entries)
        try:
            return detections_from_entries(scene.image_id, entries, cats)
        except ValidationError as exc:
            raise ProtocolError(f"detector response invalid: {exc}", raw_response=entries) from exc

    def chat(self, message: str, recorder: EnvelopeRecorder) -> str:
        cfg = self.configs[ROLE_LINGUISTIC]
        if cfg.transport == TRANSPORT_MOCK:
            script = self.scripts[ROLE_LINGUISTIC]
            request = {"messages": [{"role": "user", "content": message}], "temperature": 0}
            content = self._call(cfg, recorder, request, lambda: script(message))
            if not isinstance(content, str):
                raise ProtocolError("linguistic script must return text", raw_response=content)
            return content
        if cfg.transport != TRANSPORT_HTTP_CHAT:
            raise ValidationError(f"linguistic agent cannot use transport {cfg.transport}")
        request = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": message}],
            "temperature": 0,
        }
        data = self._call(
            cfg,
            recorder,
            request,
            lambda: self._http_post(cfg, f"{cfg.base_url}/v1/chat/completions", request, auth=True),
        )
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("malformed chat-completion response", raw_response=data) from exc
        if not isinstance(content, str):
            raise ProtocolError("chat content is not text", raw_response=data)
        return content

    def classify(self, request: ClassificationRequest, recorder: EnvelopeRecorder) -> tuple[str, float]:
        cfg = self.configs[ROLE_CLASSIFIER]
        wire = request.to_wire()
        if cfg.transport == TRANSPORT_MOCK:
            script = self.scripts[ROLE_CLASSIFIER]
            data = self._call(cfg, recorder, wire, lambda: script(wire))
        elif cfg.transport == TRANSPORT_HTTP_VISION:
            data = self._call(
                cfg, recorder, wire,
                lambda: self._http_post(cfg, f"{cfg.base_url}/classify", wire, auth=False),
            )
        else:
            raise ValidationError(f"classifier cannot use transport {cfg.transport}")

        if isinstance(data, tuple):
            data = {"label": data[0], "confidence": data[1]}
        violations = validate_classify_response(data, request.candidates)
        if violations:
            raise ProtocolError(f"classifier response invalid: {violations[0]}", raw_response=data)
        return str(data["label"]), float(data["confidence"])


# -- wire-schema validation (shared with the `validate-protocol` command) --


def validate_detect_response(entries: object) -> list[str]:
    problems = []
    if not isinstance(entries, list):
        return [f"detector response must be an array, got {type(entries).__name__}"]
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict):
            problems.append(f"entry {k} is not an object")
            continue
        if not isinstance(entry.get("image_id"), int):
            problems.append(f"entry {k}: image_id must be an integer")
        if not isinstance(entry.get("category_id"), int):
            problems.append(f"entry {k}: category_id must be an integer")
        bbox = entry.get("bbox")
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
            problems.append(f"entry {k}: bbox must be [x, y, w, h]")
        score = entry.get("score")
        if not (isinstance(score, (int, float)) and 0.0 <= float(score) <= 1.0):
            problems.append(f"entry {k}: score must be in [0, 1]")
    return problems


def validate_classify_response(data: object, candidates=None) -> list[str]:
    if not isinstance(data, dict):
        return [f"classifier response must be an object, got {type(data).__name__}"]
    problems = []
    label = data.get("label")
    if not isinstance(label, str):
        problems.append("label must be a string")
    elif candidates is not None:
        allowed = {c.strip().casefold() for c in candidates} | {UNKNOWN_LABEL}
        if label.strip().casefold() not in allowed:
            problems.append(f"label {label!r} outside the candidate set")
    conf = data.get("confidence")
    if not (isinstance(conf, (int, float)) and 0.0 <= float(conf) <= 1.0):
        problems.append("confidence must be in [0, 1]")
    return problems


def validate_verdict_objects(data: object) -> list[str]:
    """Check a structured review response body (already JSON-decoded)."""
    if not isinstance(data, list):
        return ["structured review response must be a JSON array"]
    problems = []
    seen = set()
    for k, item in enumerate(data):
        if not isinstance(item, dict):
            problems.append(f"verdict {k} is not an object")
            continue
        det_id = item.get("det_id")
        if not isinstance(det_id, int):
            problems.append(f"verdict {k}: det_id must be an integer")
        elif det_id in seen:
            problems.append(f"verdict {k}: duplicate det_id {det_id}")
        else:
            seen.add(det_id)
        if item.get("judgment") not in ("reasonable", "unreasonable"):
            problems.append(f"verdict {k}: judgment {item.get('judgment')!r} not in enum")
        suspected = item.get("suspected_label")
        if suspected is not None and not isinstance(suspected, str):
            problems.append(f"verdict {k}: suspected_label must be a string or null")
    return problems
