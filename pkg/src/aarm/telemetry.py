"""Structured security-event export for SIEM-style consumption.

Delivery is best-effort by design: a dead sink never blocks enforcement.
Events that cannot reach the sink land in a local spill file.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.request
from pathlib import Path
from typing import Any, Optional

log = logging.getLogger(__name__)

EVENT_KINDS = (
    "DECISION",
    "PENDING_CREATED",
    "PENDING_RESOLVED",
    "DRIFT_ESCALATION",
    "CHAIN_VERIFICATION",
    "CONFIG_LOADED",
)
SEVERITIES = ("INFO", "WARN", "CRITICAL")


def make_event(
    kind: str,
    session_id: str,
    *,
    event_id: str,
    time: str,
    severity: str = "INFO",
    receipt_id: Optional[str] = None,
    decision: Optional[str] = None,
    attributes: Optional[dict[str, str]] = None,
) -> dict[str, Any]:
    if kind not in EVENT_KINDS:
        raise ValueError(f"unknown event kind {kind!r}")
    if severity not in SEVERITIES:
        raise ValueError(f"unknown severity {severity!r}")
    if kind == "DECISION" and not receipt_id:
        raise ValueError("DECISION events must carry a receipt_id")
    event: dict[str, Any] = {
        "event_id": event_id,
        "kind": kind,
        "time": time,
        "session_id": session_id,
        "severity": severity,
        "attributes": attributes or {},
    }
    if receipt_id is not None:
        event["receipt_id"] = receipt_id
    if decision is not None:
        event["decision"] = decision
    return event


class TelemetryExporter:
    """Writes events to a file sink or HTTP POST endpoint.

    Sink failures are logged and spilled locally; they never propagate to
    the enforcement path.
    """

    def __init__(
        self,
        file_sink: Optional[str | Path] = None,
        http_sink: Optional[str] = None,
        spill_path: Optional[str | Path] = None,
    ) -> None:
        self.file_sink = Path(file_sink) if file_sink else None
        self.http_sink = http_sink
        self.spill_path = Path(spill_path) if spill_path else None
        self._events: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def emit_event(self, event: dict[str, Any]) -> None:
        with self._lock:
            self._events.append(event)
        line = json.dumps(event, sort_keys=True)
        try:
            if self.file_sink:
                with open(self.file_sink, "a", encoding="utf-8") as f:
                    f.write(line + "\n")
            elif self.http_sink:
                req = urllib.request.Request(
                    self.http_sink,
                    data=(line + "\n").encode("utf-8"),
                    headers={"Content-Type": "application/x-ndjson"},
                )
                urllib.request.urlopen(req, timeout=5).read()
        except Exception as exc:  # telemetry is detection, not prevention
            log.warning("telemetry sink unreachable, spilling: %s", exc)
            self._spill(line)

    def _spill(self, line: str) -> None:
        if not self.spill_path:
            return
        try:
            with open(self.spill_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
        except OSError:
            log.warning("telemetry spill file unwritable; event kept in memory only")

    def events(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._events)

    def export_batch(
        self,
        destination: str | Path,
        *,
        kind: Optional[str] = None,
        decision: Optional[str] = None,
        severity: Optional[str] = None,
        session_id: Optional[str] = None,
    ) -> int:
        """Write filtered events as newline-delimited JSON; returns count."""
        selected = []
        for e in self.events():
            if kind and e.get("kind") != kind:
                continue
            if decision and e.get("decision") != decision:
                continue
            if severity and e.get("severity") != severity:
                continue
            if session_id and e.get("session_id") != session_id:
                continue
            selected.append(e)
        try:
            with open(destination, "w", encoding="utf-8") as f:
                for e in selected:
                    f.write(json.dumps(e, sort_keys=True) + "\n")
        except OSError as exc:
            raise RuntimeError(f"cannot write export destination {destination}: {exc}") from exc
        return len(selected)
