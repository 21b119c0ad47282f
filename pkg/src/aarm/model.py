"""Shared domain vocabulary: identities, actions, authorization decisions."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional


class DecisionKind(str, Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"
    MODIFY = "MODIFY"
    STEP_UP = "STEP_UP"
    DEFER = "DEFER"


class DeferReason(str, Enum):
    MISSING_CONTEXT_FIELD = "MISSING_CONTEXT_FIELD"
    PRIORITY_CONFLICT = "PRIORITY_CONFLICT"
    LOW_CONFIDENCE = "LOW_CONFIDENCE"


@dataclass(frozen=True)
class Identity:
    """Four-layer identity binding: who the action is attributed to."""

    human_principal: str
    service_identity: str
    agent_identity: str
    session_id: str
    privilege_scope: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "human_principal": self.human_principal,
            "service_identity": self.service_identity,
            "agent_identity": self.agent_identity,
            "session_id": self.session_id,
            "privilege_scope": list(self.privilege_scope),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Identity":
        return cls(
            human_principal=d.get("human_principal", ""),
            service_identity=d.get("service_identity", ""),
            agent_identity=d.get("agent_identity", ""),
            session_id=d.get("session_id", ""),
            privilege_scope=tuple(d.get("privilege_scope", ())),
        )


@dataclass(frozen=True)
class Action:
    """A discrete tool operation requested by an agent.

    ``seq`` is server-assigned and authoritative for ordering; the timestamp
    is informational only (wall clocks skew).
    """

    tool: str
    operation: str
    parameters: dict[str, Any]
    identity: Identity
    context_ref: tuple[str, int]  # (session_id, last visible ledger seq)
    timestamp: str  # RFC 3339 UTC
    seq: int

    def to_json(self) -> dict[str, Any]:
        return {
            "tool": self.tool,
            "operation": self.operation,
            "parameters": self.parameters,
            "identity": self.identity.to_json(),
            "context_ref": {"session_id": self.context_ref[0], "seq": self.context_ref[1]},
            "timestamp": self.timestamp,
            "seq": self.seq,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Action":
        ref = d.get("context_ref", {})
        return cls(
            tool=d.get("tool", ""),
            operation=d.get("operation", ""),
            parameters=dict(d.get("parameters", {})),
            identity=Identity.from_json(d.get("identity", {})),
            context_ref=(ref.get("session_id", ""), int(ref.get("seq", 0))),
            timestamp=d.get("timestamp", ""),
            seq=int(d.get("seq", 0)),
        )


@dataclass(frozen=True)
class Decision:
    """Outcome of policy evaluation for one (action, context) pair."""

    kind: DecisionKind
    matched_policies: tuple[str, ...] = ()
    reason: str = ""
    modified_parameters: Optional[dict[str, Any]] = None
    defer_reason: Optional[DeferReason] = None
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if self.kind is DecisionKind.MODIFY and self.modified_parameters is None:
            raise ValueError("MODIFY decision requires modified_parameters")
        if self.kind is not DecisionKind.MODIFY and self.modified_parameters is not None:
            raise ValueError("modified_parameters only valid for MODIFY")
        if self.kind is DecisionKind.DEFER and self.defer_reason is None:
            raise ValueError("DEFER decision requires defer_reason")
        if self.kind in (DecisionKind.DENY, DecisionKind.DEFER, DecisionKind.STEP_UP) and not self.reason:
            raise ValueError(f"{self.kind.value} decision requires a non-empty reason")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be within [0,1]")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind.value,
            "matched_policies": list(self.matched_policies),
            "reason": self.reason,
            "confidence": self.confidence,
        }
        if self.modified_parameters is not None:
            out["modified_parameters"] = self.modified_parameters
        if self.defer_reason is not None:
            out["defer_reason"] = self.defer_reason.value
        return out


def parse_rfc3339(ts: str) -> Optional[datetime]:
    """Parse an RFC 3339 UTC timestamp; returns None when invalid."""
    if not isinstance(ts, str) or not ts:
        return None
    try:
        dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    except ValueError:
        return None
    if dt.tzinfo is None:
        return None
    return dt.astimezone(timezone.utc)


def utc_now_rfc3339(now: Optional[float] = None) -> str:
    dt = datetime.fromtimestamp(now, tz=timezone.utc) if now is not None else datetime.now(timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def validate_action(action: Action, last_seq: Optional[int] = None) -> list[str]:
    """Check Action and Identity invariants.

    Returns the list of violated field names (empty when the action is
    acceptable). Violations are data, not exceptions: the caller denies.
    """
    violations: list[str] = []
    if not action.tool:
        violations.append("tool")
    if not action.operation:
        violations.append("operation")
    ident = action.identity
    if not ident.human_principal:
        violations.append("identity.human_principal")
    if not ident.service_identity:
        violations.append("identity.service_identity")
    if not ident.agent_identity:
        violations.append("identity.agent_identity")
    if not ident.session_id:
        violations.append("identity.session_id")
    if parse_rfc3339(action.timestamp) is None:
        violations.append("timestamp")
    if last_seq is not None and action.seq <= last_seq:
        violations.append("seq")
    return violations
