"""Evaluation and enforcement core shared by the HTTP gateway and tests.

One engine instance owns the context ledger, drift trackers, policy set,
pending-item queues, receipt vault, and telemetry exporter. Everything here
is protocol-agnostic; ``gateway.py`` is a thin JSON-RPC shell around it.

Fail-closed throughout: any inability to evaluate, sign, or record blocks
the action.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import policy as policy_mod
from .canonical import canonical_digest, canonical_serialize
from .clock import SystemClock, TestClock
from .config import GatewayConfig
from .drift import BagOfTokensEmbedder, DriftTracker, distance, load_embedder
from .ledger import (
    ContextLedger,
    DerivedSignals,
    SessionExistsError,
    SessionInit,
    classify_data,
    extract_entities,
)
from .model import (
    Action,
    Decision,
    DecisionKind,
    DeferReason,
    Identity,
    utc_now_rfc3339,
    validate_action,
)
from .policy import PolicySet, evaluate
from .receipts import IdFactory, ReceiptVault, Signer, SigningError, redact_parameters
from .telemetry import TelemetryExporter, make_event

log = logging.getLogger(__name__)

# JSON-RPC error code block (fixed so conformance scripts are exact)
CODE_DENY = -32050
CODE_DEFER_PARKED = -32051
CODE_STEP_UP_PARKED = -32052
CODE_IDENTITY_REQUIRED = -32060
CODE_UNKNOWN_SESSION = -32061
CODE_FORBIDDEN = -32062

PLACEHOLDER_PREFIX = "${pending:"

_RESOURCE_KEYS = ("resource", "table", "collection", "path", "file", "target", "id", "name")


class EngineError(Exception):
    def __init__(self, code: int, message: str, data: Optional[dict] = None) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data or {}


class ToolError(Exception):
    """Upstream transport failure after an authorized forward."""


@dataclass
class PendingItem:
    item_id: str
    session_id: str
    action: Action
    kind: DecisionKind  # STEP_UP | DEFER
    created_at: float
    deadline: float
    context_snapshot_digest: str
    defer_reason: Optional[DeferReason] = None
    status: str = "PENDING"  # PENDING | RESOLVED_ALLOW | RESOLVED_DENY | TIMED_OUT
    resolver: Optional[str] = None
    depends_on: Optional[str] = None  # item_id of the pending action this one waits for
    receipt_id: Optional[str] = None  # most recent receipt describing this item
    final_receipt_id: Optional[str] = None
    result_output: Any = None
    result_error: Optional[str] = None
    note: str = ""
    decision: Optional[Decision] = None
    event: threading.Event = field(default_factory=threading.Event)

    def view(self, clock_now: float) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "session_id": self.session_id,
            "kind": self.kind.value,
            "status": self.status,
            "action": self.action.to_json(),
            "created_at": utc_now_rfc3339(self.created_at),
            "deadline": utc_now_rfc3339(self.deadline),
            "seconds_remaining": max(0.0, self.deadline - clock_now),
            "defer_reason": self.defer_reason.value if self.defer_reason else None,
            "depends_on": self.depends_on,
            "context_snapshot_digest": self.context_snapshot_digest,
            "matched_policies": list(self.decision.matched_policies) if self.decision else [],
            "reason": self.decision.reason if self.decision else "",
            "receipt_id": self.receipt_id,
            "resolver": self.resolver,
            "note": self.note,
        }


class InProcessToolServer:
    """Mock upstream used by tests and the conformance harness.

    Records every received call; responses come from a handler table or
    default to an echo payload.
    """

    def __init__(self, log_path: Optional[str | Path] = None) -> None:
        self.calls: list[dict[str, Any]] = []
        self.log_path = Path(log_path) if log_path else None
        self.handlers: dict[tuple[str, str], Callable[[dict], Any]] = {}
        self._lock = threading.Lock()

    def set_handler(self, tool: str, operation: str, handler: Callable[[dict], Any]) -> None:
        self.handlers[(tool, operation)] = handler

    def call(self, tool: str, operation: str, parameters: dict[str, Any]) -> Any:
        record = {"tool": tool, "operation": operation, "parameters": parameters}
        with self._lock:
            self.calls.append(record)
            if self.log_path:
                with open(self.log_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
        handler = self.handlers.get((tool, operation))
        if handler:
            return handler(parameters)
        return {"status": "ok", "tool": tool, "operation": operation}


def primary_resource(action: Action) -> Optional[str]:
    for key in _RESOURCE_KEYS:
        value = action.parameters.get(key)
        if isinstance(value, str):
            return value
    return None


class _SessionState:
    def __init__(self, identity: Identity, tracker: DriftTracker) -> None:
        self.identity = identity
        self.tracker = tracker
        self.lock = threading.RLock()
        self.next_seq = 1
        self.pending: dict[str, PendingItem] = {}  # item_id -> item, insertion = seq order


class Engine:
    def __init__(
        self,
        policy_set: PolicySet,
        config: Optional[GatewayConfig] = None,
        *,
        signer: Optional[Signer] = None,
        tool_caller: Optional[Any] = None,
        clock: Optional[Any] = None,
    ) -> None:
        self.config = config or GatewayConfig()
        self.policy_set = policy_set
        self.clock = clock or (TestClock() if self.config.test_mode else SystemClock())
        self.ids = IdFactory(self.config.uuid_seed)

        data_dir = Path(self.config.data_dir) if self.config.data_dir else None
        if data_dir:
            data_dir.mkdir(parents=True, exist_ok=True)
        self.ledger = ContextLedger(data_dir)

        if signer is None:
            if self.config.signing_key_path:
                signer = Signer.from_file(self.config.signing_key_path)
            else:
                signer = Signer.ephemeral()
        self.signer = signer
        self.vault = ReceiptVault(
            signer,
            store_path=(data_dir / "receipts.jsonl") if data_dir else None,
            ids=self.ids,
            redact_keys=self.config.redact_parameters,
            clock=self.clock,
        )
        if data_dir:
            (data_dir / "keys.json").write_text(json.dumps(signer.public_keys_json(), indent=2))

        telemetry_cfg = self.config.telemetry
        self.telemetry = TelemetryExporter(
            file_sink=telemetry_cfg.get("file"),
            http_sink=telemetry_cfg.get("http"),
            spill_path=(data_dir / "telemetry.spill.jsonl") if data_dir else "telemetry.spill.jsonl",
        )
        self.embedder = load_embedder(self.config.embedder)
        self.tool_caller = tool_caller or InProcessToolServer()
        self._sessions: dict[str, _SessionState] = {}
        self._lock = threading.Lock()
        self._journal_path = (data_dir / "decisions.journal.jsonl") if data_dir else None
        self._emit(
            make_event(
                "CONFIG_LOADED",
                "",
                event_id=self.ids.new_id(),
                time=self._now_str(),
                attributes={"policy_set_digest": policy_set.digest},
            )
        )

    # ------------------------------------------------------------------ utils

    def _now(self) -> float:
        return self.clock.now()

    def _now_str(self) -> str:
        return utc_now_rfc3339(self._now())

    def _emit(self, event: dict[str, Any]) -> None:
        try:
            self.telemetry.emit_event(event)
        except Exception:  # telemetry must never block enforcement
            log.exception("telemetry emit failed")

    def _session(self, session_id: str) -> _SessionState:
        state = self._sessions.get(session_id)
        if state is None:
            raise EngineError(CODE_UNKNOWN_SESSION, f"unknown session {session_id!r}")
        return state

    # -------------------------------------------------------------- sessions

    def initialize_session(
        self,
        session_id: str,
        identity: dict[str, Any] | Identity,
        original_request: Optional[str] = None,
    ) -> dict[str, Any]:
        ident = identity if isinstance(identity, Identity) else Identity.from_json(identity)
        missing = [
            f"identity.{name}"
            for name, value in (
                ("human_principal", ident.human_principal),
                ("service_identity", ident.service_identity),
                ("agent_identity", ident.agent_identity),
            )
            if not value
        ]
        if missing:
            raise EngineError(
                CODE_IDENTITY_REQUIRED,
                "IDENTITY_REQUIRED: " + ", ".join(missing),
                {"missing": missing},
            )
        if not session_id:
            raise EngineError(CODE_IDENTITY_REQUIRED, "IDENTITY_REQUIRED: session_id")
        ident = Identity(
            human_principal=ident.human_principal,
            service_identity=ident.service_identity,
            agent_identity=ident.agent_identity,
            session_id=session_id,
            privilege_scope=ident.privilege_scope,
        )
        init = SessionInit(
            session_id=session_id,
            identity=ident,
            created_at=self._now_str(),
            config_snapshot_digest=self.policy_set.digest,
            original_request=original_request,
        )
        try:
            self.ledger.init_session(init)
        except SessionExistsError:
            raise EngineError(CODE_DENY, f"session {session_id!r} already exists") from None
        tracker = DriftTracker(
            session_id=session_id,
            threshold=self.policy_set.defaults.drift_threshold,
            baseline=original_request or "",
        )
        with self._lock:
            self._sessions[session_id] = _SessionState(ident, tracker)
        return {"session_id": session_id, "policy_set_digest": self.policy_set.digest}

    # ------------------------------------------------------------- tool calls

    def tool_call(
        self,
        session_id: str,
        tool: str,
        operation: str,
        parameters: Optional[dict[str, Any]] = None,
        *,
        wait: bool = True,
    ) -> dict[str, Any]:
        """Run the full intercept-evaluate-enforce pipeline for one call."""
        state = self._session(session_id)
        parameters = parameters or {}
        with state.lock:
            seq = state.next_seq
            state.next_seq += 1
            action = Action(
                tool=tool,
                operation=operation,
                parameters=parameters,
                identity=state.identity,
                context_ref=(session_id, len(self.ledger.entries(session_id))),
                timestamp=self._now_str(),
                seq=seq,
            )
            outcome = self._decide_and_enforce(state, action)
        if outcome["status"] == "parked" and wait:
            outcome = self._hold_for_resolution(state, outcome)
        return outcome

    def _decide_and_enforce(self, state: _SessionState, action: Action) -> dict[str, Any]:
        session_id = action.identity.session_id

        violations = validate_action(action)
        if violations:
            decision = Decision(
                kind=DecisionKind.DENY,
                reason="invalid action: " + ", ".join(violations),
                confidence=0.0,
            )
            return self._block(state, action, decision, ctx=None)

        if action.tool not in self.config.tool_registry and not isinstance(
            self.tool_caller, InProcessToolServer
        ):
            decision = Decision(kind=DecisionKind.DENY, reason="unknown tool", confidence=0.0)
            return self._block(state, action, decision, ctx=None)
        if isinstance(self.tool_caller, InProcessToolServer) and self.config.tool_registry:
            if action.tool not in self.config.tool_registry:
                decision = Decision(kind=DecisionKind.DENY, reason="unknown tool", confidence=0.0)
                return self._block(state, action, decision, ctx=None)

        semantic_distance: Optional[float] = None
        if state.tracker.has_baseline:
            semantic_distance = distance(state.tracker.baseline, action, self.embedder)
            escalated = state.tracker.update(semantic_distance)
            if escalated:
                self._emit(
                    make_event(
                        "DRIFT_ESCALATION",
                        session_id,
                        event_id=self.ids.new_id(),
                        time=self._now_str(),
                        severity="WARN",
                        attributes={
                            "cumulative_drift": f"{state.tracker.running_max:.4f}",
                            "threshold": f"{state.tracker.threshold:.4f}",
                            "seq": str(action.seq),
                        },
                    )
                )

        ctx = self._snapshot(state, session_id)
        try:
            decision = evaluate(action, ctx, self.policy_set)
        except Exception:  # no fail-open, ever
            log.exception("policy evaluation raised; failing closed")
            decision = Decision(kind=DecisionKind.DENY, reason="evaluation failure (fail closed)", confidence=0.0)

        depends_on = self._dependency_parent(state, action)
        if depends_on and decision.kind in (DecisionKind.ALLOW, DecisionKind.MODIFY):
            decision = Decision(
                kind=DecisionKind.DEFER,
                matched_policies=decision.matched_policies,
                reason=f"depends on pending action {depends_on}",
                defer_reason=DeferReason.MISSING_CONTEXT_FIELD,
                confidence=decision.confidence,
            )

        if decision.kind is DecisionKind.DENY:
            return self._block(state, action, decision, ctx)
        if decision.kind in (DecisionKind.DEFER, DecisionKind.STEP_UP):
            return self._park(state, action, decision, ctx, depends_on, semantic_distance)
        return self._execute(state, action, decision, ctx, semantic_distance)

    def _snapshot(self, state: _SessionState, session_id: str) -> dict[str, Any]:
        ctx = self.ledger.current_context(session_id)
        tracker = state.tracker
        if tracker.has_baseline:
            ctx["cumulative_drift"] = tracker.running_max if tracker.distances else None
            ctx["confidence"] = tracker.confidence
        else:
            ctx["cumulative_drift"] = None
            ctx["confidence"] = 0.0
        ctx["deferred_count"] = self._pending_defer_count(state)
        return ctx

    def _pending_defer_count(self, state: _SessionState) -> int:
        return sum(
            1
            for item in state.pending.values()
            if item.status == "PENDING" and item.kind is DecisionKind.DEFER
        )

    def _dependency_parent(self, state: _SessionState, action: Action) -> Optional[str]:
        """item_id of the PENDING item this action depends on, if any."""
        pending = [i for i in state.pending.values() if i.status == "PENDING"]
        if not pending:
            return None
        strings: list[str] = []
        for v in action.parameters.values():
            if isinstance(v, str):
                strings.append(v)
        blob = " ".join(strings)
        for item in pending:
            if item.item_id in blob or f"{PLACEHOLDER_PREFIX}{item.item_id}}}" in blob:
                return item.item_id
        resource = primary_resource(action)
        if resource is not None:
            for item in pending:
                if item.action.tool == action.tool and primary_resource(item.action) == resource:
                    return item.item_id
        return None

    # ------------------------------------------------------------ enforcement

    def _receipt_materials(
        self,
        action: Action,
        decision: Decision,
        ctx: Optional[dict[str, Any]],
        identity: Identity,
    ) -> dict[str, Any]:
        context_group: dict[str, Any] = {
            "session_id": identity.session_id,
            "context_snapshot_digest": canonical_digest(ctx) if ctx is not None else None,
            "data_classifications": list(ctx.get("data_classifications", [])) if ctx else [],
            "cumulative_drift": ctx.get("cumulative_drift") if ctx else None,
            "deferred_count": ctx.get("deferred_count", 0) if ctx else 0,
        }
        decision_group: dict[str, Any] = {
            "kind": decision.kind.value,
            "matched_policies": list(decision.matched_policies),
            "reason": decision.reason,
            "policy_set_digest": self.policy_set.digest,
            "confidence": decision.confidence,
        }
        if decision.defer_reason is not None:
            decision_group["defer_reason"] = decision.defer_reason.value
        materials: dict[str, Any] = {
            "action": {
                "tool": action.tool,
                "operation": action.operation,
                "parameters": action.parameters,
                "timestamp": action.timestamp,
                "seq": action.seq,
            },
            "context": context_group,
            "identity": identity.to_json(),
            "decision": decision_group,
        }
        if decision.modified_parameters is not None:
            materials["modified_parameters"] = decision.modified_parameters
        return materials

    def _issue(self, materials: dict[str, Any], severity: str = "INFO") -> dict[str, Any]:
        receipt = self.vault.issue_receipt(materials)
        self._emit(
            make_event(
                "DECISION",
                materials["context"]["session_id"],
                event_id=self.ids.new_id(),
                time=self._now_str(),
                severity=severity,
                receipt_id=receipt["receipt_id"],
                decision=materials["decision"]["kind"],
            )
        )
        return receipt

    def _deny_severity(self, decision: Decision) -> str:
        for pid in decision.matched_policies:
            for p in self.policy_set.policies:
                if p.id == pid and p.forbidden:
                    return "CRITICAL"
        return "WARN"

    def _block(
        self,
        state: _SessionState,
        action: Action,
        decision: Decision,
        ctx: Optional[dict[str, Any]],
    ) -> dict[str, Any]:
        materials = self._receipt_materials(action, decision, ctx, state.identity)
        materials["outcome"] = {"status": "BLOCKED"}
        try:
            receipt = self._issue(materials, severity=self._deny_severity(decision))
            receipt_id = receipt["receipt_id"]
        except SigningError:
            receipt_id = None  # still blocked; fail-closed needs no receipt to deny
        return {
            "status": "denied",
            "code": CODE_DENY,
            "reason": decision.reason,
            "matched_policies": list(decision.matched_policies),
            "receipt_id": receipt_id,
            "seq": action.seq,
        }

    def _journal(self, action: Action, decision: Decision) -> None:
        if not self._journal_path:
            return
        line = {
            "session_id": action.identity.session_id,
            "seq": action.seq,
            "kind": decision.kind.value,
            "time": self._now_str(),
        }
        with open(self._journal_path, "ab") as f:
            f.write(canonical_serialize(line) + b"\n")

    def _execute(
        self,
        state: _SessionState,
        action: Action,
        decision: Decision,
        ctx: Optional[dict[str, Any]],
        semantic_distance: Optional[float],
        *,
        deferral: Optional[dict[str, Any]] = None,
        approval: Optional[dict[str, Any]] = None,
        out_of_order: bool = False,
    ) -> dict[str, Any]:
        """Forward an authorized action upstream, record output + receipt."""
        effective_params = (
            decision.modified_parameters
            if decision.kind is DecisionKind.MODIFY
            else action.parameters
        )
        # Decision must be durable before any upstream effect can occur.
        try:
            if self.vault.signer is None:
                raise SigningError("no signing key loaded")
            self._journal(action, decision)
            materials = self._receipt_materials(action, decision, ctx, state.identity)
        except Exception:
            log.exception("pre-forward persistence failed; blocking (fail closed)")
            blocked = Decision(kind=DecisionKind.DENY, reason="enforcement failure (fail closed)", confidence=0.0)
            return self._block(state, action, blocked, ctx)

        error: Optional[str] = None
        output: Any = None
        try:
            output = self.tool_caller.call(action.tool, action.operation, effective_params)
        except Exception as exc:
            error = str(exc)

        labels = classify_data(output, self.policy_set.classification_rules, is_output=True, action=action)
        labels |= classify_data(action, self.policy_set.classification_rules)
        entities = extract_entities(action.parameters) | extract_entities(output)
        tracker = state.tracker
        signals = DerivedSignals(
            data_classifications=tuple(sorted(labels)),
            semantic_distance=semantic_distance,
            cumulative_drift=tracker.running_max if tracker.has_baseline else 0.0,
            scope_expansion=self._scope_expansion(state, action),
            entities=tuple(sorted(entities)),
            confidence=tracker.confidence,
        )
        self.ledger.append_entry(
            state.identity.session_id, action, output, signals, allow_out_of_order=out_of_order
        )

        status = "EXECUTED" if error is None else "EXECUTED_WITH_ERROR"
        materials["outcome"] = {"status": status}
        if error is not None:
            materials["outcome"]["error"] = error
        if deferral:
            materials["deferral"] = deferral
        if approval:
            materials["approval"] = approval
        receipt = self._issue(materials)

        self._resolve_ready(state)  # new context may unblock deferred items
        return {
            "status": "executed",
            "output": output,
            "error": error,
            "receipt_id": receipt["receipt_id"],
            "seq": action.seq,
            "modified_parameters": decision.modified_parameters,
        }

    def _scope_expansion(self, state: _SessionState, action: Action) -> bool:
        prior_tools = {
            e["action"]["tool"] for e in self.ledger.entries(state.identity.session_id)
        }
        tracker = state.tracker
        return (
            action.tool not in prior_tools
            and tracker.has_baseline
            and tracker.running_max > tracker.threshold
        )

    def _park(
        self,
        state: _SessionState,
        action: Action,
        decision: Decision,
        ctx: dict[str, Any],
        depends_on: Optional[str],
        semantic_distance: Optional[float],
    ) -> dict[str, Any]:
        if decision.kind is DecisionKind.DEFER:
            if self._pending_defer_count(state) >= self.config.cascade_limit:
                denied = Decision(
                    kind=DecisionKind.DENY,
                    matched_policies=decision.matched_policies,
                    reason="cascade bound exceeded",
                    confidence=decision.confidence,
                )
                return self._block(state, action, denied, ctx)
            timeout = self.config.timeouts.defer
        else:
            timeout = self.config.timeouts.step_up

        now = self._now()
        item = PendingItem(
            item_id=self.ids.new_id(),
            session_id=state.identity.session_id,
            action=action,
            kind=decision.kind,
            created_at=now,
            deadline=now + timeout,
            context_snapshot_digest=canonical_digest(ctx),
            defer_reason=decision.defer_reason,
            depends_on=depends_on,
            decision=decision,
        )
        materials = self._receipt_materials(action, decision, ctx, state.identity)
        materials["outcome"] = {"status": "PARKED"}
        try:
            receipt = self._issue(materials)
        except SigningError:
            blocked = Decision(kind=DecisionKind.DENY, reason="receipt store unavailable (fail closed)", confidence=0.0)
            return self._block(state, action, blocked, ctx)
        item.receipt_id = receipt["receipt_id"]
        state.pending[item.item_id] = item
        self.ledger.set_deferred_count(state.identity.session_id, self._pending_defer_count(state))
        self._emit(
            make_event(
                "PENDING_CREATED",
                state.identity.session_id,
                event_id=self.ids.new_id(),
                time=self._now_str(),
                receipt_id=receipt["receipt_id"],
                decision=decision.kind.value,
                attributes={"item_id": item.item_id},
            )
        )
        return {
            "status": "parked",
            "code": CODE_DEFER_PARKED if decision.kind is DecisionKind.DEFER else CODE_STEP_UP_PARKED,
            "kind": decision.kind.value,
            "item_id": item.item_id,
            "deadline": utc_now_rfc3339(item.deadline),
            "reason": decision.reason,
            "receipt_id": receipt["receipt_id"],
            "seq": action.seq,
        }

    def _hold_for_resolution(self, state: _SessionState, parked: dict[str, Any]) -> dict[str, Any]:
        """Block the transport up to the hold limit waiting for a terminal
        resolution; otherwise return the parked notice for polling."""
        item = state.pending.get(parked["item_id"])
        if item is None:
            return parked
        if item.event.wait(timeout=self.config.timeouts.transport_hold):
            return self._terminal_outcome(item)
        return parked

    def _terminal_outcome(self, item: PendingItem) -> dict[str, Any]:
        if item.status == "RESOLVED_ALLOW":
            return {
                "status": "executed",
                "output": item.result_output,
                "error": item.result_error,
                "receipt_id": item.final_receipt_id,
                "seq": item.action.seq,
            }
        resolution = "timeout" if item.status == "TIMED_OUT" else (item.resolver or "")
        return {
            "status": "denied",
            "code": CODE_DENY,
            "reason": item.note or f"resolved {item.status}",
            "resolution": resolution,
            "receipt_id": item.final_receipt_id,
            "seq": item.action.seq,
        }

    # ----------------------------------------------------------- pending API

    def _redacted_view(self, item: PendingItem, now: float) -> dict[str, Any]:
        view = item.view(now)
        if self.config.redact_parameters:
            action = dict(view["action"])
            action["parameters"] = redact_parameters(
                action.get("parameters", {}), self.config.redact_parameters
            )
            view["action"] = action
        return view

    def list_pending(self, session_id: Optional[str] = None) -> list[dict[str, Any]]:
        now = self._now()
        views = []
        with self._lock:
            states = list(self._sessions.items())
        for sid, state in states:
            if session_id and sid != session_id:
                continue
            with state.lock:
                for item in state.pending.values():
                    if item.status == "PENDING":
                        view = self._redacted_view(item, now)
                        ctx = self._snapshot(state, sid)
                        view["context"] = {
                            "original_request": ctx.get("original_request"),
                            "history": ctx.get("history", []),
                            "data_classifications": ctx.get("data_classifications", []),
                            "cumulative_drift": ctx.get("cumulative_drift"),
                            "drift_threshold": self.policy_set.defaults.drift_threshold,
                        }
                        views.append(view)
        views.sort(key=lambda v: (v["session_id"], v["action"]["seq"]))
        return views

    def history_items(self, session_id: Optional[str] = None) -> list[dict[str, Any]]:
        now = self._now()
        views = []
        with self._lock:
            states = list(self._sessions.items())
        for sid, state in states:
            if session_id and sid != session_id:
                continue
            with state.lock:
                for item in state.pending.values():
                    if item.status != "PENDING":
                        view = self._redacted_view(item, now)
                        view["final_receipt_id"] = item.final_receipt_id
                        views.append(view)
        views.sort(key=lambda v: (v["session_id"], v["action"]["seq"]))
        return views

    def _find_item(self, item_id: str) -> tuple[_SessionState, PendingItem]:
        with self._lock:
            states = list(self._sessions.values())
        for state in states:
            item = state.pending.get(item_id)
            if item:
                return state, item
        raise EngineError(CODE_UNKNOWN_SESSION, f"no such pending item {item_id!r}", {"not_found": True})

    def poll_parked(self, session_id: str, item_id: str) -> dict[str, Any]:
        state, item = self._find_item(item_id)
        if item.session_id != session_id:
            raise EngineError(CODE_FORBIDDEN, "FORBIDDEN: item belongs to another session")
        if item.status == "PENDING":
            return {
                "status": "pending",
                "item_id": item.item_id,
                "kind": item.kind.value,
                "deadline": utc_now_rfc3339(item.deadline),
            }
        return self._terminal_outcome(item)

    def submit_approval(
        self,
        item_id: str,
        verdict: str,
        approver_token: str,
        note: str = "",
    ) -> dict[str, Any]:
        approver = self.config.approver_tokens.get(approver_token)
        if approver is None:
            self._emit(
                make_event(
                    "PENDING_RESOLVED",
                    "",
                    event_id=self.ids.new_id(),
                    time=self._now_str(),
                    severity="WARN",
                    attributes={"item_id": item_id, "result": "unauthorized_approver"},
                )
            )
            raise EngineError(CODE_FORBIDDEN, "FORBIDDEN: not an authorized approver", {"http_status": 403})
        if verdict not in ("ALLOW", "DENY"):
            raise EngineError(CODE_DENY, f"invalid verdict {verdict!r}", {"http_status": 400})
        state, item = self._find_item(item_id)
        with state.lock:
            if item.status != "PENDING":
                raise EngineError(
                    CODE_DENY,
                    f"item already terminal: {item.status}",
                    {"http_status": 409, "status": item.status},
                )
            approval = {
                "approver": approver,
                "verdict": verdict,
                "timestamp": self._now_str(),
                "note": note,
            }
            if verdict == "ALLOW":
                self._resolve_allow(state, item, resolver=approver, approval=approval, method="human_allow")
            else:
                self._resolve_deny(state, item, resolver=approver, approval=approval, method="human_deny", note=note or "denied by approver")
        return self._terminal_outcome(item) | {"item_id": item.item_id, "status_detail": item.status}

    # ------------------------------------------------------------ resolution

    def _deferral_group(self, item: PendingItem, method: str) -> dict[str, Any]:
        return {
            "defer_reason": item.defer_reason.value if item.defer_reason else None,
            "resolution_method": method,
            "resolution_timestamp": self._now_str(),
            "parent_receipt_id": item.receipt_id,
        }

    def _resolve_allow(
        self,
        state: _SessionState,
        item: PendingItem,
        *,
        resolver: str,
        approval: Optional[dict[str, Any]] = None,
        method: str = "human_allow",
        decision: Optional[Decision] = None,
    ) -> None:
        ctx = self._snapshot(state, item.session_id)
        final = decision or Decision(
            kind=DecisionKind.ALLOW,
            matched_policies=item.decision.matched_policies if item.decision else (),
            reason="",
            confidence=item.decision.confidence if item.decision else 1.0,
        )
        outcome = self._execute(
            state,
            item.action,
            final,
            ctx,
            semantic_distance=None,
            deferral=self._deferral_group(item, method),
            approval=approval,
            out_of_order=True,
        )
        item.status = "RESOLVED_ALLOW"
        item.resolver = resolver
        item.result_output = outcome.get("output")
        item.result_error = outcome.get("error")
        item.final_receipt_id = outcome.get("receipt_id")
        self._finish_item(state, item, "RESOLVED_ALLOW")

    def _resolve_deny(
        self,
        state: _SessionState,
        item: PendingItem,
        *,
        resolver: str,
        method: str,
        note: str,
        approval: Optional[dict[str, Any]] = None,
        timed_out: bool = False,
    ) -> None:
        ctx = self._snapshot(state, item.session_id)
        denied = Decision(
            kind=DecisionKind.DENY,
            matched_policies=item.decision.matched_policies if item.decision else (),
            reason=note,
            confidence=item.decision.confidence if item.decision else 0.0,
        )
        materials = self._receipt_materials(item.action, denied, ctx, state.identity)
        materials["outcome"] = {"status": "BLOCKED"}
        materials["deferral"] = self._deferral_group(item, method)
        if approval:
            materials["approval"] = approval
        receipt = self._issue(materials, severity="WARN")
        item.status = "TIMED_OUT" if timed_out else "RESOLVED_DENY"
        item.resolver = resolver
        item.note = note
        item.final_receipt_id = receipt["receipt_id"]
        self._finish_item(state, item, item.status)

    def _finish_item(self, state: _SessionState, item: PendingItem, result: str) -> None:
        self.ledger.set_deferred_count(item.session_id, self._pending_defer_count(state))
        self._emit(
            make_event(
                "PENDING_RESOLVED",
                item.session_id,
                event_id=self.ids.new_id(),
                time=self._now_str(),
                receipt_id=item.final_receipt_id,
                decision=item.kind.value,
                attributes={"item_id": item.item_id, "result": result},
            )
        )
        item.event.set()
        self._resolve_dependents(state, item)

    def _resolve_dependents(self, state: _SessionState, parent: PendingItem) -> None:
        dependents = sorted(
            (
                i
                for i in state.pending.values()
                if i.status == "PENDING" and i.depends_on == parent.item_id
            ),
            key=lambda i: i.action.seq,
        )
        for item in dependents:
            if parent.status == "RESOLVED_ALLOW":
                item.depends_on = None
                self._try_auto_resolve(state, item)
            else:
                self._resolve_deny(
                    state,
                    item,
                    resolver="auto:dependency",
                    method="re-evaluation",
                    note=f"depends on action {parent.action.seq}, which was denied",
                )

    def _try_auto_resolve(self, state: _SessionState, item: PendingItem) -> bool:
        """Re-evaluate one pending DEFER item; apply any determinate outcome."""
        if item.kind is not DecisionKind.DEFER or item.status != "PENDING":
            return False
        if item.depends_on and item.depends_on in state.pending and state.pending[item.depends_on].status == "PENDING":
            return False
        ctx = self._snapshot(state, item.session_id)
        decision = evaluate(item.action, ctx, self.policy_set)
        if decision.kind is DecisionKind.DEFER:
            return False
        if decision.kind in (DecisionKind.ALLOW, DecisionKind.MODIFY):
            self._resolve_allow(
                state, item, resolver="auto:re-evaluation", method="re-evaluation", decision=decision
            )
            return True
        if decision.kind is DecisionKind.DENY:
            self._resolve_deny(
                state,
                item,
                resolver="auto:re-evaluation",
                method="re-evaluation",
                note=decision.reason,
            )
            return True
        # now STEP_UP: convert in place, deadline reset, fresh receipt
        item.kind = DecisionKind.STEP_UP
        item.decision = decision
        item.deadline = self._now() + self.config.timeouts.step_up
        materials = self._receipt_materials(item.action, decision, ctx, state.identity)
        materials["outcome"] = {"status": "PARKED"}
        materials["deferral"] = self._deferral_group(item, "re-evaluation")
        receipt = self._issue(materials)
        item.receipt_id = receipt["receipt_id"]
        self.ledger.set_deferred_count(item.session_id, self._pending_defer_count(state))
        return True

    def _resolve_ready(self, state: _SessionState) -> None:
        for item in sorted(
            [i for i in state.pending.values() if i.status == "PENDING" and i.kind is DecisionKind.DEFER],
            key=lambda i: i.action.seq,
        ):
            self._try_auto_resolve(state, item)

    def resolve_deferred_auto(self, session_id: str) -> list[tuple[str, str]]:
        """Sweep one session's deferred items; returns (item_id, new status)."""
        state = self._session(session_id)
        results = []
        with state.lock:
            items = sorted(
                [i for i in state.pending.values() if i.status == "PENDING" and i.kind is DecisionKind.DEFER],
                key=lambda i: i.action.seq,
            )
            for item in items:
                before = item.status
                self._try_auto_resolve(state, item)
                if item.status != before or item.kind is DecisionKind.STEP_UP:
                    results.append((item.item_id, item.status if item.status != "PENDING" else "CONVERTED_STEP_UP"))
        return results

    def expire_timeouts(self, now: Optional[float] = None) -> list[str]:
        """Transition every overdue PENDING item to TIMED_OUT (outcome DENY)."""
        now = self._now() if now is None else now
        expired: list[str] = []
        with self._lock:
            states = list(self._sessions.values())
        for state in states:
            with state.lock:
                overdue = sorted(
                    [i for i in state.pending.values() if i.status == "PENDING" and i.deadline <= now],
                    key=lambda i: i.action.seq,
                )
                for item in overdue:
                    if item.status != "PENDING":
                        continue
                    self._resolve_deny(
                        state,
                        item,
                        resolver="timeout",
                        method="timeout",
                        note=f"{item.kind.value} timed out without resolution",
                        timed_out=True,
                    )
                    expired.append(item.item_id)
        return expired

    # -------------------------------------------------------------- chain ops

    def verify_session_chain(self, session_id: str) -> Optional[int]:
        corrupt_at = self.ledger.verify_chain(session_id)
        self._emit(
            make_event(
                "CHAIN_VERIFICATION",
                session_id,
                event_id=self.ids.new_id(),
                time=self._now_str(),
                severity="INFO" if corrupt_at is None else "CRITICAL",
                attributes={"corrupt_at": "" if corrupt_at is None else str(corrupt_at)},
            )
        )
        return corrupt_at


def build_engine(config: GatewayConfig, *, tool_caller: Optional[Any] = None, clock=None) -> Engine:
    if not config.policy_path:
        raise ValueError("config.policy_path is required")
    policy_set = policy_mod.parse_policy_set(Path(config.policy_path).read_bytes())
    return Engine(policy_set, config, tool_caller=tool_caller, clock=clock)
