"""Per-session append-only, hash-chained context log plus derived signals.

The ledger is the source of truth for "what has this session already done":
ordered action history, union of data classifications, entities seen, and
the drift/confidence numbers the policy engine consumes.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .canonical import canonical_digest, canonical_serialize
from .model import Action, Identity, parse_rfc3339

DEFAULT_LATTICE = ("PUBLIC", "INTERNAL", "CONFIDENTIAL", "PII")

# Pattern-based detection defaults: email addresses, SSN-shaped numbers,
# and 13-19 digit runs passing Luhn.
_EMAIL_RE = re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}")
_SSN_RE = re.compile(r"\b\d{3}-\d{2}-\d{4}\b")
_CARDLIKE_RE = re.compile(r"\b\d{13,19}\b")
_DNS_RE = re.compile(r"\b(?:[a-z0-9](?:[a-z0-9-]*[a-z0-9])?\.)+[a-z]{2,}\b")
_ENTITY_KEY_RE = re.compile(r"(^|_)(id|user|account)$", re.IGNORECASE)


class LedgerError(Exception):
    pass


class SessionExistsError(LedgerError):
    pass


class NoSessionError(LedgerError):
    pass


class OrderingError(LedgerError):
    pass


def _luhn_ok(digits: str) -> bool:
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = ord(ch) - 48
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


@dataclass(frozen=True)
class ClassificationRules:
    """Policy-defined classification configuration.

    ``tool_map`` entries are ``{"tool", "operation" (optional), "labels"}``.
    ``patterns`` are extra (compiled regex, label) pairs on top of the
    built-in PII detectors.
    """

    lattice: tuple[str, ...] = DEFAULT_LATTICE
    tool_map: tuple[dict[str, Any], ...] = ()
    patterns: tuple[tuple[re.Pattern[str], str], ...] = ()

    @property
    def highest_label(self) -> str:
        return self.lattice[-1]


def _walk_strings(value: Any, out: list[str]) -> None:
    if isinstance(value, str):
        out.append(value)
    elif isinstance(value, dict):
        for k, v in value.items():
            out.append(str(k))
            _walk_strings(v, out)
    elif isinstance(value, (list, tuple)):
        for item in value:
            _walk_strings(item, out)
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        out.append(str(value))


def _pattern_labels(text: str, rules: ClassificationRules) -> set[str]:
    labels: set[str] = set()
    if _EMAIL_RE.search(text) or _SSN_RE.search(text):
        labels.add("PII")
    for m in _CARDLIKE_RE.finditer(text):
        if _luhn_ok(m.group()):
            labels.add("PII")
            break
    for pattern, label in rules.patterns:
        if pattern.search(text):
            labels.add(label)
    return labels


def classify_data(
    source: Any,
    rules: Optional[ClassificationRules] = None,
    *,
    is_output: bool = False,
    action: Optional[Action] = None,
) -> set[str]:
    """Union of explicit labels, pattern hits, and tool-mapping labels.

    When nothing matches and the value is a tool output, the highest
    configured label applies: unknown data entering the session is treated
    at maximum sensitivity.
    """
    rules = rules or ClassificationRules()
    labels: set[str] = set()

    if isinstance(source, Action):
        action = source
        payload: Any = source.parameters
    else:
        payload = source

    if isinstance(payload, dict) and "_classification" in payload:
        explicit = payload["_classification"]
        if isinstance(explicit, str):
            labels.add(explicit)
        elif isinstance(explicit, (list, tuple)):
            labels.update(str(x) for x in explicit)

    strings: list[str] = []
    _walk_strings(payload, strings)
    if strings:
        labels |= _pattern_labels(" ".join(strings), rules)

    if action is not None:
        for entry in rules.tool_map:
            if entry.get("tool") == action.tool and entry.get("operation") in (None, action.operation):
                labels.update(entry.get("labels", ()))

    if not labels and is_output:
        labels.add(rules.highest_label)
    return labels


def extract_entities(value: Any) -> set[str]:
    """Regex harvest: email addresses, DNS-shaped names, and values of
    parameter keys named id/user/account."""
    entities: set[str] = set()
    strings: list[str] = []
    _walk_strings(value, strings)
    text = " ".join(strings)
    entities.update(_EMAIL_RE.findall(text))
    entities.update(_DNS_RE.findall(text.lower()))

    def from_keys(v: Any) -> None:
        if isinstance(v, dict):
            for k, item in v.items():
                if _ENTITY_KEY_RE.search(str(k)) and isinstance(item, (str, int)):
                    entities.add(str(item))
                from_keys(item)
        elif isinstance(v, (list, tuple)):
            for item in v:
                from_keys(item)

    from_keys(value)
    return entities


@dataclass(frozen=True)
class DerivedSignals:
    """The per-entry signal bundle attached alongside action and output."""

    data_classifications: tuple[str, ...] = ()
    semantic_distance: Optional[float] = None
    cumulative_drift: float = 0.0
    scope_expansion: bool = False
    entities: tuple[str, ...] = ()
    confidence: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "data_classifications": sorted(self.data_classifications),
            "semantic_distance": self.semantic_distance,
            "cumulative_drift": self.cumulative_drift,
            "scope_expansion": self.scope_expansion,
            "entities": sorted(self.entities),
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class SessionInit:
    session_id: str
    identity: Identity
    created_at: str
    config_snapshot_digest: str
    original_request: Optional[str] = None
    schema_version: int = 1

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "record": "session_init",
            "session_id": self.session_id,
            "original_request": self.original_request,
            "identity": self.identity.to_json(),
            "created_at": self.created_at,
            "config_snapshot_digest": self.config_snapshot_digest,
        }


def _entry_json(
    session_id: str,
    seq: int,
    action: Action,
    output: Any,
    signals: DerivedSignals,
    prev_hash: str,
) -> dict[str, Any]:
    return {
        "schema_version": 1,
        "record": "context_entry",
        "session_id": session_id,
        "seq": seq,
        "action": action.to_json(),
        "output": output,
        "signals": signals.to_json(),
        "prev_hash": prev_hash,
    }


def _safe_filename(session_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", session_id) + ".ctx.jsonl"


class _Session:
    def __init__(self, init: SessionInit, path: Optional[Path]) -> None:
        self.init = init
        self.genesis_digest = canonical_digest(init.to_json())
        self.entries: list[dict[str, Any]] = []
        self.path = path
        self.lock = threading.RLock()
        self.deferred_count = 0
        self.last_action_seq = 0


class ContextLedger:
    """All live sessions' hash-chained context logs.

    When ``data_dir`` is set, each session is mirrored to
    ``<session_id>.ctx.jsonl``: line 1 the SessionInit, one canonical JSON
    entry per line after. Per-session writes are serialized.
    """

    def __init__(self, data_dir: Optional[str | Path] = None) -> None:
        self.data_dir = Path(data_dir) if data_dir else None
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    def init_session(self, init: SessionInit) -> str:
        """Persist the genesis record; returns its canonical digest, which
        anchors the chain (prev_hash of seq 1)."""
        if not init.session_id:
            raise LedgerError("session_id must be non-empty")
        if parse_rfc3339(init.created_at) is None:
            raise LedgerError("created_at is not a valid RFC 3339 UTC timestamp")
        with self._lock:
            if init.session_id in self._sessions:
                raise SessionExistsError(init.session_id)
            path = self.data_dir / _safe_filename(init.session_id) if self.data_dir else None
            session = _Session(init, path)
            self._sessions[init.session_id] = session
        if path:
            with open(path, "wb") as f:
                f.write(canonical_serialize(init.to_json()) + b"\n")
        return session.genesis_digest

    def _session(self, session_id: str) -> _Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise NoSessionError(session_id) from None

    def has_session(self, session_id: str) -> bool:
        return session_id in self._sessions

    def original_request(self, session_id: str) -> Optional[str]:
        return self._session(session_id).init.original_request

    def last_action_seq(self, session_id: str) -> int:
        return self._session(session_id).last_action_seq

    def note_action_seq(self, session_id: str, seq: int) -> None:
        """Record the latest submitted action seq (submission order is wider
        than the executed-entry order the chain records)."""
        session = self._session(session_id)
        with session.lock:
            session.last_action_seq = max(session.last_action_seq, seq)

    def set_deferred_count(self, session_id: str, count: int) -> None:
        self._session(session_id).deferred_count = count

    def append_entry(
        self,
        session_id: str,
        action: Action,
        output: Any,
        signals: DerivedSignals,
        *,
        allow_out_of_order: bool = False,
    ) -> dict[str, Any]:
        """Append one entry with correct prev/entry hashes.

        Only executed actions reach the ledger, so appended action seqs may
        have gaps (denied/parked actions consume seqs without entries) but
        must strictly increase — unless ``allow_out_of_order``, used when a
        deferred action finally executes after later submissions.
        """
        session = self._session(session_id)
        with session.lock:
            appended_seqs = {e["action"]["seq"] for e in session.entries}
            if action.seq in appended_seqs:
                raise OrderingError(f"duplicate action seq {action.seq}")
            if not allow_out_of_order:
                last = max(appended_seqs) if appended_seqs else 0
                if action.seq <= last:
                    raise OrderingError(f"action seq {action.seq} after {last}")
            prev_hash = session.entries[-1]["entry_hash"] if session.entries else session.genesis_digest
            seq = len(session.entries) + 1
            entry = _entry_json(session_id, seq, action, output, signals, prev_hash)
            entry["entry_hash"] = canonical_digest(entry)
            session.entries.append(entry)
            session.last_action_seq = max(session.last_action_seq, action.seq)
            if session.path:
                with open(session.path, "ab") as f:
                    f.write(canonical_serialize(entry) + b"\n")
            return entry

    def entries(self, session_id: str) -> list[dict[str, Any]]:
        return list(self._session(session_id).entries)

    def current_context(self, session_id: str) -> dict[str, Any]:
        """Context snapshot for policy evaluation and receipts."""
        session = self._session(session_id)
        with session.lock:
            history = [
                {
                    "tool": e["action"]["tool"],
                    "operation": e["action"]["operation"],
                    "parameters_digest": canonical_digest(e["action"]["parameters"]),
                    "seq": e["action"]["seq"],
                }
                for e in session.entries
            ]
            classifications: set[str] = set()
            entities: set[str] = set()
            for e in session.entries:
                classifications.update(e["signals"]["data_classifications"])
                entities.update(e["signals"]["entities"])
            latest = session.entries[-1]["signals"] if session.entries else None
            has_baseline = bool(session.init.original_request)
            return {
                "session_id": session_id,
                "original_request": session.init.original_request,
                "history": history,
                "prior_tools": sorted({h["tool"] for h in history}),
                "data_classifications": sorted(classifications),
                "entities": sorted(entities),
                "cumulative_drift": latest["cumulative_drift"] if (latest and has_baseline) else None,
                "confidence": latest["confidence"] if latest else (1.0 if has_baseline else 0.0),
                "deferred_count": session.deferred_count,
            }

    def _stored_lines(self, session_id: str) -> list[Optional[dict[str, Any]]]:
        import json

        session = self._session(session_id)
        if session.path and session.path.exists():
            raw = session.path.read_bytes().splitlines()
            records: list[Optional[dict[str, Any]]] = []
            for line in raw:
                if not line.strip():
                    continue
                try:
                    parsed = json.loads(line)
                except (ValueError, UnicodeDecodeError):
                    parsed = None
                records.append(parsed if isinstance(parsed, dict) else None)
            return records
        out: list[Optional[dict[str, Any]]] = [session.init.to_json()]
        out.extend(session.entries)
        return out

    def verify_chain(self, session_id: str) -> Optional[int]:
        """Recompute every hash and link; None when intact, else the smallest
        seq at which the chain breaks."""
        records = self._stored_lines(session_id)
        if not records:
            return 1
        genesis = records[0]
        if genesis is None or genesis.get("record") != "session_init":
            return 1
        prev_hash = canonical_digest(genesis)
        expected_seq = 1
        for record in records[1:]:
            if record is None:
                return expected_seq
            if record.get("seq") != expected_seq:
                return expected_seq
            stored_hash = record.get("entry_hash")
            body = {k: v for k, v in record.items() if k != "entry_hash"}
            if record.get("prev_hash") != prev_hash:
                return expected_seq
            if canonical_digest(body) != stored_hash:
                return expected_seq
            prev_hash = stored_hash
            expected_seq += 1
        return None
