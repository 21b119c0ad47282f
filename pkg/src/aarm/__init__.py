"""AARM reference runtime: policy-gated authorization for AI-agent tool calls."""

from .model import Action, Decision, DecisionKind, DeferReason, Identity

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Decision",
    "DecisionKind",
    "DeferReason",
    "Identity",
    "__version__",
]
