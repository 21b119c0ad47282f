"""Signed receipts: issuance, storage, querying, and offline verification.

A receipt binds action, context digest, identity, decision, and outcome
under an Ed25519 signature over the canonical bytes of everything except
the signature itself. Verification needs only the receipt and a public-key
file, never the issuing system.
"""

from __future__ import annotations

import base64
import random
import threading
import uuid
from pathlib import Path
from typing import Any, Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .canonical import canonical_digest, canonical_serialize
from .model import parse_rfc3339

import hashlib
import json


class SigningError(Exception):
    """Signing key unavailable or unusable; the caller must fail closed."""


class IdFactory:
    """UUID source; seedable so conformance runs are reproducible."""

    def __init__(self, seed: Optional[int] = None) -> None:
        self._rng = random.Random(seed) if seed is not None else None
        self._lock = threading.Lock()

    def new_id(self) -> str:
        if self._rng is None:
            return str(uuid.uuid4())
        with self._lock:
            return str(uuid.UUID(int=self._rng.getrandbits(128), version=4))


def generate_signing_key(path: str | Path) -> str:
    """Create a new Ed25519 keypair; the private key (base64 raw) is written
    to ``path``. Returns the key_id."""
    key = Ed25519PrivateKey.generate()
    raw = key.private_bytes_raw()
    Path(path).write_text(base64.b64encode(raw).decode("ascii") + "\n")
    return key_id_for(key.public_key())


def key_id_for(public_key: Ed25519PublicKey) -> str:
    return hashlib.sha256(public_key.public_bytes_raw()).hexdigest()[:8]


class Signer:
    def __init__(self, private_key: Ed25519PrivateKey) -> None:
        self._key = private_key
        self.public_key = private_key.public_key()
        self.key_id = key_id_for(self.public_key)

    @classmethod
    def from_file(cls, path: str | Path) -> "Signer":
        try:
            raw = base64.b64decode(Path(path).read_text().strip())
            return cls(Ed25519PrivateKey.from_private_bytes(raw))
        except Exception as exc:
            raise SigningError(f"cannot load signing key from {path}: {exc}") from exc

    @classmethod
    def ephemeral(cls) -> "Signer":
        return cls(Ed25519PrivateKey.generate())

    def sign(self, payload: bytes) -> bytes:
        return self._key.sign(payload)

    def public_keys_json(self) -> dict[str, str]:
        """The ``keys.json`` document: key_id -> base64 raw public key."""
        return {self.key_id: base64.b64encode(self.public_key.public_bytes_raw()).decode("ascii")}


def redact_parameters(parameters: dict[str, Any], redact_keys: Iterable[str]) -> dict[str, Any]:
    """Replace listed parameter values with a binding digest marker, so the
    receipt still commits to the value without carrying it."""
    redact = set(redact_keys)
    out: dict[str, Any] = {}
    for k, v in parameters.items():
        out[k] = {"_redacted": canonical_digest(v)} if k in redact else v
    return out


class ReceiptVault:
    """Append-only receipt store: ``receipts.jsonl`` plus an in-memory index."""

    def __init__(
        self,
        signer: Optional[Signer],
        store_path: Optional[str | Path] = None,
        ids: Optional[IdFactory] = None,
        redact_keys: Iterable[str] = (),
        clock=None,
    ) -> None:
        self.signer = signer
        self.store_path = Path(store_path) if store_path else None
        self.ids = ids or IdFactory()
        self.redact_keys = tuple(redact_keys)
        self.clock = clock
        self._receipts: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def issue_receipt(self, materials: dict[str, Any]) -> dict[str, Any]:
        """Assign id and timestamp, sign, append to the store, return.

        The store append happens before the caller sees the receipt: what
        the caller saw is durable.
        """
        if self.signer is None:
            raise SigningError("no signing key loaded")
        receipt = dict(materials)
        receipt["schema_version"] = 1
        receipt["receipt_id"] = self.ids.new_id()
        receipt["issued_at"] = self._now()
        if "action" in receipt and self.redact_keys:
            action = dict(receipt["action"])
            action["parameters"] = redact_parameters(action.get("parameters", {}), self.redact_keys)
            receipt["action"] = action
        payload = canonical_serialize(receipt)
        receipt["signature"] = {
            "algorithm": "Ed25519",
            "key_id": self.signer.key_id,
            "value": base64.b64encode(self.signer.sign(payload)).decode("ascii"),
        }
        with self._lock:
            if self.store_path:
                with open(self.store_path, "ab") as f:
                    f.write(canonical_serialize(receipt) + b"\n")
            self._receipts.append(receipt)
        return receipt

    def _now(self) -> str:
        from .model import utc_now_rfc3339

        if self.clock is not None:
            return utc_now_rfc3339(self.clock.now())
        return utc_now_rfc3339()

    def query_receipts(
        self,
        session_id: Optional[str] = None,
        kinds: Optional[Iterable[str]] = None,
        time_range: Optional[tuple[Optional[str], Optional[str]]] = None,
        tool: Optional[str] = None,
    ) -> list[dict[str, Any]]:
        kinds_set = set(kinds) if kinds else None
        start = end = None
        if time_range:
            start_s, end_s = time_range
            if start_s is not None:
                start = parse_rfc3339(start_s)
                if start is None:
                    raise ValueError(f"bad time range start: {start_s!r}")
            if end_s is not None:
                end = parse_rfc3339(end_s)
                if end is None:
                    raise ValueError(f"bad time range end: {end_s!r}")
        with self._lock:
            out = []
            for r in self._receipts:
                if session_id and r.get("context", {}).get("session_id") != session_id:
                    continue
                if kinds_set and r.get("decision", {}).get("kind") not in kinds_set:
                    continue
                if tool and r.get("action", {}).get("tool") != tool:
                    continue
                if start or end:
                    issued = parse_rfc3339(r.get("issued_at", ""))
                    if issued is None:
                        continue
                    if start and issued < start:
                        continue
                    if end and issued > end:
                        continue
                out.append(r)
        # Stable sort: receipts issued at the same instant keep insertion order.
        out.sort(key=lambda r: r.get("issued_at", ""))
        return out

    def all_receipts(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._receipts)

    def count(self) -> int:
        with self._lock:
            return len(self._receipts)


def verify_receipt(receipt: dict[str, Any], public_keys: dict[str, str]) -> tuple[bool, str]:
    """Offline signature check. Returns (valid, reason)."""
    signature = receipt.get("signature")
    if not isinstance(signature, dict):
        return False, "missing signature"
    if signature.get("algorithm") != "Ed25519":
        return False, "unsupported algorithm"
    key_id = signature.get("key_id")
    if key_id not in public_keys:
        return False, "unknown key"
    try:
        pub = Ed25519PublicKey.from_public_bytes(base64.b64decode(public_keys[key_id]))
    except Exception:
        return False, "malformed public key"
    value = signature.get("value", "")
    try:
        sig_bytes = base64.b64decode(value, validate=True)
        # canonical encoding only: a re-spelled base64 string is a mutation
        if base64.b64encode(sig_bytes).decode("ascii") != value:
            raise ValueError("non-canonical base64")
    except Exception:
        return False, "malformed signature value"
    body = {k: v for k, v in receipt.items() if k != "signature"}
    try:
        pub.verify(sig_bytes, canonical_serialize(body))
    except InvalidSignature:
        return False, "signature mismatch"
    return True, ""


def verify_receipt_file(receipts_path: str | Path, keys_path: str | Path) -> list[tuple[str, str]]:
    """Validate every receipt in a ``receipts.jsonl`` file against a
    ``keys.json`` file. Returns (receipt_id, reason) for each invalid one."""
    public_keys = json.loads(Path(keys_path).read_text())
    failures: list[tuple[str, str]] = []
    with open(receipts_path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                receipt = json.loads(line)
            except json.JSONDecodeError:
                failures.append((f"<line {lineno}>", "unparseable receipt"))
                continue
            ok, reason = verify_receipt(receipt, public_keys)
            if not ok:
                failures.append((receipt.get("receipt_id", f"<line {lineno}>"), reason))
    return failures
