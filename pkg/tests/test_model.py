"""Domain-type invariants: actions, identities, decisions, timestamps."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aarm.model import (
    Action,
    Decision,
    DecisionKind,
    DeferReason,
    Identity,
    parse_rfc3339,
    utc_now_rfc3339,
    validate_action,
)

from conftest import make_action, make_identity


def test_valid_action_has_no_violations():
    assert validate_action(make_action()) == []


@pytest.mark.parametrize("field,expected", [
    ("tool", "tool"),
    ("operation", "operation"),
])
def test_empty_action_fields_flagged(field, expected):
    action = make_action(**{field: ""})
    assert expected in validate_action(action)


@pytest.mark.parametrize("layer", [
    "human_principal", "service_identity", "agent_identity", "session_id",
])
def test_missing_identity_layer_flagged(layer):
    ident = make_identity(**{layer: ""})
    action = Action(
        tool="db", operation="query", parameters={}, identity=ident,
        context_ref=("s-1", 0), timestamp="2026-01-01T00:00:00.000Z", seq=1,
    )
    assert f"identity.{layer}" in validate_action(action)


def test_bad_timestamp_flagged():
    assert "timestamp" in validate_action(make_action(timestamp="yesterday"))
    assert "timestamp" in validate_action(make_action(timestamp="2026-01-01T00:00:00"))


def test_stale_seq_flagged():
    action = make_action(seq=3)
    assert validate_action(action, last_seq=2) == []
    assert "seq" in validate_action(action, last_seq=3)
    assert "seq" in validate_action(action, last_seq=7)


@given(st.integers(min_value=1, max_value=10**6), st.integers(min_value=0, max_value=10**6))
def test_seq_rule_is_strict_increase(seq, last):
    action = make_action(seq=seq)
    violations = validate_action(action, last_seq=last)
    assert ("seq" in violations) == (seq <= last)


def test_identity_json_round_trip():
    ident = make_identity("s-9", privilege_scope=["a", "b"])
    assert Identity.from_json(ident.to_json()) == ident


def test_action_json_round_trip():
    action = make_action(parameters={"sql": "SELECT 1"}, seq=4)
    assert Action.from_json(action.to_json()) == action


def test_parse_rfc3339_accepts_utc_and_offsets():
    assert parse_rfc3339("2026-01-01T00:00:00Z") is not None
    assert parse_rfc3339("2026-01-01T01:00:00+01:00") is not None
    assert parse_rfc3339(utc_now_rfc3339()) is not None
    assert parse_rfc3339(utc_now_rfc3339(1_700_000_000.5)) is not None


@pytest.mark.parametrize("bad", ["", "not-a-time", "2026-01-01T00:00:00", 7, None])
def test_parse_rfc3339_rejects_naive_and_garbage(bad):
    assert parse_rfc3339(bad) is None


def test_modify_requires_modified_parameters():
    with pytest.raises(ValueError):
        Decision(kind=DecisionKind.MODIFY, reason="r")
    Decision(kind=DecisionKind.MODIFY, reason="r", modified_parameters={"x": 1})


def test_modified_parameters_only_for_modify():
    with pytest.raises(ValueError):
        Decision(kind=DecisionKind.ALLOW, modified_parameters={"x": 1})


def test_defer_requires_defer_reason():
    with pytest.raises(ValueError):
        Decision(kind=DecisionKind.DEFER, reason="r")
    Decision(kind=DecisionKind.DEFER, reason="r", defer_reason=DeferReason.LOW_CONFIDENCE)


@pytest.mark.parametrize("kind", [DecisionKind.DENY, DecisionKind.STEP_UP])
def test_negative_decisions_require_reason(kind):
    with pytest.raises(ValueError):
        Decision(kind=kind)


def test_confidence_bounds():
    with pytest.raises(ValueError):
        Decision(kind=DecisionKind.ALLOW, confidence=1.5)
    with pytest.raises(ValueError):
        Decision(kind=DecisionKind.ALLOW, confidence=-0.1)


def test_decision_to_json_carries_optional_fields():
    d = Decision(kind=DecisionKind.DEFER, reason="r",
                 defer_reason=DeferReason.PRIORITY_CONFLICT, matched_policies=("p",))
    doc = d.to_json()
    assert doc["kind"] == "DEFER"
    assert doc["defer_reason"] == "PRIORITY_CONFLICT"
    assert doc["matched_policies"] == ["p"]
