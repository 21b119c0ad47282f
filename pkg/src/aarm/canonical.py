"""Canonical JSON byte serialization.

Everything that gets hashed or signed goes through :func:`canonical_serialize`,
so the rules here are the bit-exact contract shared with external verifiers:

- object keys sorted lexicographically by code point
- no insignificant whitespace
- UTF-8 output with minimal escaping (no ``\\uXXXX`` for printable characters)
- numbers in shortest round-trip decimal form
- NaN / infinity rejected (such values must never reach signing)
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any


class SerializationError(ValueError):
    """A value cannot be represented canonically (programming bug upstream)."""


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise SerializationError(f"non-finite number at {path}: {value!r}")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise SerializationError(f"non-string key at {path}: {k!r}")
            _check(v, f"{path}.{k}")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check(v, f"{path}[{i}]")
        return
    raise SerializationError(f"unserializable type at {path}: {type(value).__name__}")


def canonical_serialize(value: Any) -> bytes:
    """Serialize a JSON-compatible value tree to canonical UTF-8 bytes.

    Pure: equal values always yield byte-identical output, across runs
    and processes.
    """
    _check(value, "$")
    # json.dumps renders floats via float.__repr__, which is the shortest
    # round-trip form on CPython; sort_keys orders by code point.
    text = json.dumps(
        value,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def canonical_digest(value: Any) -> str:
    """Hex SHA-256 of the canonical bytes of ``value``."""
    return hashlib.sha256(canonical_serialize(value)).hexdigest()
