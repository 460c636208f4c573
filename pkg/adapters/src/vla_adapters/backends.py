"""Model backends for the vision adapters.

The "stub" model is a deterministic stand-in used in CI and for wiring
tests: it honors every contract (schema, candidate membership, score
ranges) without any ML runtime. Real models plug in behind the same two
functions; loading failures surface as AdapterError with a diagnostic so
the server refuses to start rather than serving garbage.
"""

from __future__ import annotations

import hashlib

from .config import AdapterConfig, AdapterError


def _unit(*parts) -> float:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class StubDetector:
    """Deterministic boxes derived from the image identity."""

    def __init__(self, model: str):
        self.model = model

    def detect(self, image_id: int, image_ref: str | None) -> list[dict]:
        key = image_ref or image_id
        count = 1 + int(_unit(self.model, key, "count") * 3)
        out = []
        for k in range(count):
            x = round(_unit(self.model, key, k, "x") * 500, 1)
            y = round(_unit(self.model, key, k, "y") * 350, 1)
            w = round(10 + _unit(self.model, key, k, "w") * 120, 1)
            h = round(10 + _unit(self.model, key, k, "h") * 120, 1)
            score = round(0.05 + _unit(self.model, key, k, "s") * 0.95, 4)
            out.append(
                {
                    "image_id": int(image_id),
                    "category_id": 1 + int(_unit(self.model, key, k, "c") * 80),
                    "bbox": [x, y, w, h],
                    "score": score,
                }
            )
        return out


class StubClassifier:
    """Picks the candidate of highest pseudo-similarity to the region."""

    def __init__(self, model: str):
        self.model = model

    def classify(self, image_ref, region, candidates: list[str]) -> tuple[str, float]:
        scored = [
            (_unit(self.model, image_ref, tuple(region), name), name) for name in candidates
        ]
        scored.sort(reverse=True)
        best_sim, best = scored[0]
        total = sum(s for s, _ in scored) or 1.0
        confidence = max(min(best_sim / total, 1.0), 1e-6)
        return best, round(confidence, 6)


def load_detector(cfg: AdapterConfig):
    if cfg.model == "stub":
        return StubDetector(cfg.model)
    try:  # real backends are optional extras; absence is a startup error
        import torchvision  # noqa: F401
    except ImportError as exc:
        raise AdapterError(
            f"cannot load detector model {cfg.model!r}: torchvision is not "
            f"installed ({exc}); install it or use model = \"stub\""
        ) from exc
    raise AdapterError(
        f"no loader registered for detector model {cfg.model!r}; only the "
        "stub backend ships with this package"
    )


def load_classifier(cfg: AdapterConfig):
    if cfg.model == "stub":
        return StubClassifier(cfg.model)
    try:
        import open_clip  # noqa: F401
    except ImportError as exc:
        raise AdapterError(
            f"cannot load classifier model {cfg.model!r}: open_clip is not "
            f"installed ({exc}); install it or use model = \"stub\""
        ) from exc
    raise AdapterError(
        f"no loader registered for classifier model {cfg.model!r}; only the "
        "stub backend ships with this package"
    )
