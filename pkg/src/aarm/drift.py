"""Semantic distance between the session's original request and each action.

Shipped embedder is a deterministic hashed bag-of-tokens: no model weights,
no platform dependence, adequate for desk-scale drift detection. Anything
smarter plugs in behind the same interface.
"""

from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Any, Protocol

from .model import Action

DIMENSION = 256

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase maximal alphanumeric runs."""
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> list[float]: ...


class BagOfTokensEmbedder:
    """Token counts hashed into a fixed number of buckets, L2-normalized.

    Same text always yields the identical vector; empty token sets yield
    the zero vector.
    """

    def __init__(self, dimension: int = DIMENSION) -> None:
        self.dimension = dimension

    def embed(self, text: str) -> list[float]:
        vec = [0.0] * self.dimension
        for token in tokenize(text):
            vec[_fnv1a64(token) % self.dimension] += 1.0
        norm = math.sqrt(sum(x * x for x in vec))
        if norm == 0.0:
            return vec
        return [x / norm for x in vec]


class SubprocessEmbedder:
    """Plug-in embedder: a command taking UTF-8 text on stdin and printing
    ``dimension`` comma-separated decimals."""

    def __init__(self, command: str, dimension: int) -> None:
        self.command = command
        self.dimension = dimension

    def embed(self, text: str) -> list[float]:
        out = subprocess.run(
            shlex.split(self.command),
            input=text.encode("utf-8"),
            capture_output=True,
            check=True,
        ).stdout.decode("utf-8")
        vec = [float(x) for x in out.strip().split(",")]
        if len(vec) != self.dimension:
            raise ValueError(f"embedder returned {len(vec)} values, expected {self.dimension}")
        return vec


def load_embedder(config: Any) -> Embedder:
    """Build an embedder from the ``embedder`` config value."""
    if config in (None, "builtin-bag"):
        return BagOfTokensEmbedder()
    if isinstance(config, dict) and "exec" in config:
        return SubprocessEmbedder(config["exec"], int(config.get("dimension", DIMENSION)))
    raise ValueError(f"unrecognized embedder config: {config!r}")


def _flatten_values(value: Any, out: list[str]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten_values(value[key], out)
    elif isinstance(value, (list, tuple)):
        for item in value:
            _flatten_values(item, out)
    elif isinstance(value, bool):
        pass  # booleans carry no descriptive text
    elif isinstance(value, (str, int, float)):
        out.append(str(value))


def action_descriptor(action: Action) -> str:
    """Deterministic text form of an action: tool, operation, then parameter
    string/number values in key-sorted order, space-joined, lowercased."""
    parts: list[str] = [action.tool, action.operation]
    _flatten_values(action.parameters, parts)
    return " ".join(parts).lower()


class NoBaselineError(ValueError):
    """distance() called without an original request."""


def distance(original_request: str, action: Action, embedder: Embedder) -> float:
    """1 - cosine similarity between the request and the action descriptor.

    Cosine is clamped to [0,1] before subtraction so plug-in embedders with
    negative components cannot push the result out of range.
    """
    if not original_request:
        raise NoBaselineError("no original request to measure against")
    a = embedder.embed(original_request)
    b = embedder.embed(action_descriptor(action))
    cos = sum(x * y for x, y in zip(a, b))
    cos = min(1.0, max(0.0, cos))
    return 1.0 - cos


@dataclass
class DriftTracker:
    """Per-session running record of semantic distances.

    Cumulative drift is the running maximum; escalation is edge-triggered
    the first time the maximum crosses the configured threshold.
    """

    session_id: str
    threshold: float = 0.6
    baseline: str = ""
    distances: list[float] = field(default_factory=list)
    running_max: float = 0.0

    @property
    def has_baseline(self) -> bool:
        return bool(self.baseline)

    def update(self, d: float) -> bool:
        """Record one distance; returns True iff this update crosses the
        threshold (edge-triggered)."""
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"distance out of range: {d}")
        was_within = self.running_max <= self.threshold
        self.distances.append(d)
        if d > self.running_max:
            self.running_max = d
        return was_within and self.running_max > self.threshold

    @property
    def confidence(self) -> float:
        """1 - cumulative drift when a baseline exists, else 0."""
        if not self.has_baseline:
            return 0.0
        return 1.0 - self.running_max
