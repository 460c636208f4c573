"""Adapter configuration."""

from __future__ import annotations

from dataclasses import dataclass

ROLES = ("detector", "classifier", "linguistic")


class AdapterError(Exception):
    """Configuration or model-loading failure; the server refuses to start."""


@dataclass(frozen=True)
class AdapterConfig:
    role: str
    model: str = "stub"
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 0
    max_batch_size: int = 1
    # linguistic proxy only: where requests are forwarded and how they
    # authenticate; the vendor tag picks the request/response normalization
    upstream_base: str | None = None
    upstream_vendor: str = "openai"
    upstream_env: str = "VLA_UPSTREAM_API_KEY"

    def __post_init__(self):
        if self.role not in ROLES:
            raise AdapterError(f"unknown adapter role {self.role!r}")
        if self.max_batch_size < 1:
            raise AdapterError("max_batch_size must be >= 1")
        if self.role == "linguistic" and not self.upstream_base:
            raise AdapterError("the linguistic proxy needs an upstream_base URL")
