"""Shared fixtures: identities, actions, policy documents, engine factory."""

from __future__ import annotations

from typing import Any, Optional

import pytest

from aarm.clock import TestClock
from aarm.config import GatewayConfig, Timeouts
from aarm.engine import Engine, InProcessToolServer
from aarm.model import Action, Identity
from aarm.policy import parse_policy_set


IDENTITY_DOC = {
    "human_principal": "alice@company.com",
    "service_identity": "agent-svc@iam",
    "agent_identity": "agent-runtime-7",
    "privilege_scope": ["db.read", "email.send"],
}


def make_identity(session_id: str = "s-1", **overrides: Any) -> Identity:
    doc = {**IDENTITY_DOC, "session_id": session_id, **overrides}
    return Identity.from_json(doc)


def make_action(
    tool: str = "db",
    operation: str = "query",
    parameters: Optional[dict[str, Any]] = None,
    seq: int = 1,
    session_id: str = "s-1",
    timestamp: str = "2026-01-01T00:00:00.000Z",
) -> Action:
    return Action(
        tool=tool,
        operation=operation,
        parameters=parameters if parameters is not None else {},
        identity=make_identity(session_id),
        context_ref=(session_id, seq - 1),
        timestamp=timestamp,
        seq=seq,
    )


def policy_doc(policies: list[dict[str, Any]], **top: Any) -> dict[str, Any]:
    doc: dict[str, Any] = {"policies": policies}
    doc.update(top)
    return doc


BASIC_POLICIES = [
    {
        "id": "forbid_drop_db",
        "forbidden": True,
        "decision": "DENY",
        "priority": 1000,
        "reason": "Forbidden: DROP DATABASE",
        "match": ["AND", ["==", "action.tool", "db"],
                  ["==", "action.operation", "execute"],
                  ["MATCHES", "action.params.query", "DROP\\s+DATABASE"]],
    },
    {
        "id": "deny_external_email_after_pii",
        "decision": "DENY",
        "priority": 100,
        "reason": "External email after PII access",
        "match": ["AND", ["==", "action.tool", "email"],
                  ["==", "action.operation", "send"],
                  ["NOT_IN", "action.params.to", "@internal_domains"],
                  ["CONTAINS", "context.data_classification", "PII"]],
    },
    {
        "id": "allow_cleanup_delete",
        "decision": "ALLOW",
        "step_up": True,
        "priority": 40,
        "reason": "Deletion aligned with stated cleanup intent",
        "match": ["AND", ["==", "action.tool", "db"],
                  ["==", "action.operation", "delete"],
                  ["CONTAINS", "context.original_request", "clean up"]],
    },
    {
        "id": "defer_rotation",
        "decision": "DEFER",
        "priority": 60,
        "reason": "Credential rotation outside a routine maintenance window",
        "match": ["AND", ["==", "action.tool", "iam"],
                  ["==", "action.operation", "rotate_credentials"]],
    },
    {
        "id": "deny_db_delete",
        "decision": "DENY",
        "priority": 20,
        "reason": "Destructive database operation",
        "match": ["AND", ["==", "action.tool", "db"],
                  ["==", "action.operation", "delete"]],
    },
    {
        "id": "allow_db_query",
        "decision": "ALLOW",
        "priority": 10,
        "match": ["AND", ["==", "action.tool", "db"], ["==", "action.operation", "query"]],
    },
    {
        "id": "allow_email",
        "decision": "ALLOW",
        "priority": 10,
        "match": ["AND", ["==", "action.tool", "email"], ["==", "action.operation", "send"]],
    },
    {
        "id": "allow_web",
        "decision": "ALLOW",
        "priority": 10,
        "match": ["==", "action.tool", "web"],
    },
    {
        "id": "allow_iam_describe",
        "decision": "ALLOW",
        "priority": 10,
        "match": ["AND", ["==", "action.tool", "iam"], ["==", "action.operation", "describe"]],
    },
]

BASIC_DOC = policy_doc(
    BASIC_POLICIES,
    named_lists={"internal_domains": ["@company.com"]},
    defaults={"unmatched_decision": "DENY", "confidence_threshold": 0.5, "drift_threshold": 0.6},
)


@pytest.fixture
def basic_policy_set():
    return parse_policy_set(BASIC_DOC)


@pytest.fixture
def clock():
    return TestClock()


@pytest.fixture
def engine_factory(tmp_path, clock):
    """Build engines over tmp dirs with a shared test clock and mock upstream."""

    built = []

    def build(
        doc: Optional[dict[str, Any]] = None,
        *,
        data_dir: Optional[str] = None,
        tool_server: Optional[InProcessToolServer] = None,
        **config_overrides: Any,
    ) -> Engine:
        n = len(built)
        cfg = GatewayConfig(
            data_dir=data_dir if data_dir is not None else str(tmp_path / f"data{n}"),
            telemetry={"file": str(tmp_path / f"telemetry{n}.jsonl")},
            timeouts=Timeouts(step_up=300.0, defer=120.0, transport_hold=5.0),
            test_mode=True,
            uuid_seed=1234 + n,
        )
        for key, value in config_overrides.items():
            setattr(cfg, key, value)
        engine = Engine(
            parse_policy_set(doc if doc is not None else BASIC_DOC),
            cfg,
            tool_caller=tool_server or InProcessToolServer(),
            clock=clock,
        )
        built.append(engine)
        return engine

    return build


def init(engine: Engine, session_id: str = "s-1",
         original_request: Optional[str] = "Summarize Q3 sales for leadership") -> str:
    engine.initialize_session(session_id, {**IDENTITY_DOC, "session_id": session_id},
                              original_request)
    return session_id
