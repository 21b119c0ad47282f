"""Gateway configuration. Fail mode is fixed CLOSED and not configurable."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

ENV_CONFIG = "AARM_CONFIG"
ENV_TEST_CLOCK = "AARM_TEST_CLOCK"


@dataclass
class Timeouts:
    step_up: float = 300.0
    defer: float = 120.0
    transport_hold: float = 30.0


@dataclass
class GatewayConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8711
    tool_registry: dict[str, str] = field(default_factory=dict)
    policy_path: Optional[str] = None
    data_dir: Optional[str] = None
    timeouts: Timeouts = field(default_factory=Timeouts)
    cascade_limit: int = 8
    approver_tokens: dict[str, str] = field(default_factory=dict)  # token -> approver id
    signing_key_path: Optional[str] = None
    telemetry: dict[str, str] = field(default_factory=dict)  # {"file": path} | {"http": url}
    redact_parameters: list[str] = field(default_factory=list)
    embedder: Any = "builtin-bag"
    test_mode: bool = False
    uuid_seed: Optional[int] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "GatewayConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "GatewayConfig":
        timeouts_doc = doc.get("timeouts", {})
        return cls(
            listen_host=doc.get("listen_host", "127.0.0.1"),
            listen_port=int(doc.get("listen_port", 8711)),
            tool_registry=dict(doc.get("tool_registry", {})),
            policy_path=doc.get("policy_path"),
            data_dir=doc.get("data_dir"),
            timeouts=Timeouts(
                step_up=float(timeouts_doc.get("step_up", 300.0)),
                defer=float(timeouts_doc.get("defer", 120.0)),
                transport_hold=float(timeouts_doc.get("transport_hold", 30.0)),
            ),
            cascade_limit=int(doc.get("cascade_limit", 8)),
            approver_tokens=dict(doc.get("approver_tokens", {})),
            signing_key_path=doc.get("signing_key_path"),
            telemetry=dict(doc.get("telemetry", {})),
            redact_parameters=list(doc.get("redact_parameters", [])),
            embedder=doc.get("embedder", "builtin-bag"),
            test_mode=bool(doc.get("test_mode", False)),
            uuid_seed=doc.get("uuid_seed"),
        )


def resolve_config_path(cli_path: Optional[str]) -> str:
    path = cli_path or os.environ.get(ENV_CONFIG)
    if not path:
        raise SystemExit(f"no config file: pass --config or set {ENV_CONFIG}")
    return path
