"""Configuration: TOML file plus environment for credentials.

Recognized keys mirror the engine surface:

    data_dir = "./data"
    provider = "mock"              # or "http"
    registry = ""                  # workflow registry path; empty = built-in
    workers = 1

    [provider_http]
    url = ""
    api_key_env = "TREELINE_PROVIDER_KEY"

    [backend]                      # optional external generation server
    url = ""
    api_key_env = ""

    [export]
    encoder_cmd = ""               # e.g. "ffmpeg -f concat -i {concat_list} {output}"
    still_duration_ms = 3000

    [service]
    listen = "127.0.0.1:8765"
    cors_allow = []
    static_dir = ""                # built frontend bundle, served at /
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .engine import EngineConfig


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8765"
    cors_allow: list[str] = field(default_factory=list)
    static_dir: str = ""

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(":", 1)[1])


def load_config(path: Optional[str | Path] = None, *,
                data_dir: Optional[str] = None,
                provider: Optional[str] = None,
                registry: Optional[str] = None) -> tuple[EngineConfig, ServiceConfig]:
    """Parse the TOML config; explicit keyword overrides win over the file."""
    raw: dict = {}
    if path:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)

    provider_http = raw.get("provider_http", {})
    backend = raw.get("backend", {})
    export = raw.get("export", {})
    service = raw.get("service", {})

    engine_config = EngineConfig(
        data_dir=Path(data_dir or raw.get("data_dir", "./treeline-data")),
        provider=provider or raw.get("provider", "mock"),
        provider_url=provider_http.get("url", ""),
        provider_api_key_env=provider_http.get("api_key_env", "TREELINE_PROVIDER_KEY"),
        registry_path=Path(registry) if registry else (
            Path(raw["registry"]) if raw.get("registry") else None),
        encoder_cmd=export.get("encoder_cmd", ""),
        still_duration_ms=int(export.get("still_duration_ms", 3000)),
        backend_url=backend.get("url", ""),
        backend_api_key_env=backend.get("api_key_env", ""),
        workers=int(raw.get("workers", 1)),
    )
    service_config = ServiceConfig(
        listen=service.get("listen", "127.0.0.1:8765"),
        cors_allow=list(service.get("cors_allow", [])),
        static_dir=service.get("static_dir", ""),
    )
    return engine_config, service_config
