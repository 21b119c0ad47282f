"""Policy document parsing and two-stage (action, context) evaluation.

Predicates are prefix-notation expression trees, e.g.::

    ["AND", ["==", "action.tool", "email"],
            ["NOT_IN", "action.params.to", "@internal_domains"],
            ["CONTAINS", "context.data_classification", "PII"]]

Evaluation is three-valued: context leaves whose field is not yet populated
yield INDETERMINATE, which propagates through Kleene logic and ultimately
forces a DEFER rather than guessing.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .canonical import canonical_digest
from .ledger import DEFAULT_LATTICE, ClassificationRules
from .model import Action, Decision, DecisionKind, DeferReason


class Indeterminate:
    """Third truth value; a singleton."""

    _instance: Optional["Indeterminate"] = None

    def __new__(cls) -> "Indeterminate":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INDETERMINATE"

    def __bool__(self) -> bool:  # never let it leak into a plain if
        raise TypeError("INDETERMINATE has no truth value")


INDETERMINATE = Indeterminate()

_MISSING = object()  # absent action parameter
_UNPOPULATED = object()  # context field not yet populated

# Context is never consulted in the forbidden stage.
CTX_UNAVAILABLE = None

_ACTION_FIELDS = {"action.tool", "action.operation"}
_IDENTITY_FIELDS = {
    "identity.human_principal",
    "identity.service_identity",
    "identity.agent_identity",
    "identity.session_id",
    "identity.privilege_scope",
}
_CONTEXT_FIELDS = {
    "context.data_classification",
    "context.original_request",
    "context.prior_tools",
    "context.entities",
    "context.cumulative_drift",
    "context.confidence",
    "context.deferred_count",
}

_COMPARATORS = {"==", "!=", "<", "<=", ">", ">="}
_SET_OPS = {"IN", "NOT_IN", "CONTAINS"}
_ORDERED = {"<", "<=", ">", ">="}

TriValue = Any  # True | False | INDETERMINATE
LeafGetter = Callable[[Action, Optional[dict]], Any]


class PolicyParseError(ValueError):
    """All problems found in one load; the load is all-or-nothing."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = errors
        super().__init__("; ".join(errors))


def _field_getter(path: str, errors: list[str], where: str) -> tuple[Optional[LeafGetter], bool]:
    """Compile a field path to a getter; returns (getter, references_context)."""
    if path in _ACTION_FIELDS:
        attr = path.split(".", 1)[1]
        return (lambda a, c, _attr=attr: getattr(a, _attr)), False
    if path.startswith("action.params."):
        key = path[len("action.params."):]
        return (lambda a, c, _k=key: a.parameters.get(_k, _MISSING)), False
    if path in _IDENTITY_FIELDS:
        attr = path.split(".", 1)[1]

        def get_ident(a: Action, c: Optional[dict], _attr: str = attr) -> Any:
            value = getattr(a.identity, _attr)
            return list(value) if isinstance(value, tuple) else value

        return get_ident, False
    if path in _CONTEXT_FIELDS:
        key = path.split(".", 1)[1]
        snapshot_key = "data_classifications" if key == "data_classification" else key

        def get_ctx(a: Action, c: Optional[dict], _k: str = snapshot_key) -> Any:
            if c is None:
                return _UNPOPULATED
            if _k in ("original_request", "cumulative_drift") and c.get(_k) is None:
                return _UNPOPULATED
            if _k == "confidence" and c.get("original_request") is None:
                return _UNPOPULATED
            return c.get(_k)

        return get_ctx, True
    errors.append(f"{where}: unknown field path {path!r}")
    return None, False


def _is_field_path(value: Any) -> bool:
    return isinstance(value, str) and value.split(".", 1)[0] in ("action", "identity", "context")


def _kleene_and(values: list[TriValue]) -> TriValue:
    saw_indet = False
    for v in values:
        if v is False:
            return False
        if v is INDETERMINATE:
            saw_indet = True
    return INDETERMINATE if saw_indet else True


def _kleene_or(values: list[TriValue]) -> TriValue:
    saw_indet = False
    for v in values:
        if v is True:
            return True
        if v is INDETERMINATE:
            saw_indet = True
    return INDETERMINATE if saw_indet else False


def _member(value: Any, items: list[Any]) -> bool:
    """Membership with suffix matching: list items starting with '@' or '.'
    match string suffixes, so internal_domains can hold '@company.com'."""
    for item in items:
        if value == item:
            return True
        if isinstance(item, str) and isinstance(value, str) and item[:1] in ("@", ".") and value.endswith(item):
            return True
    return False


@dataclass(frozen=True)
class Predicate:
    """A compiled match predicate."""

    source: Any
    references_context: bool
    _fn: Callable[[Action, Optional[dict]], TriValue]

    def evaluate(self, action: Action, ctx: Optional[dict]) -> TriValue:
        return self._fn(action, ctx)


def _compile_node(
    node: Any,
    named_lists: dict[str, list[Any]],
    errors: list[str],
    where: str,
) -> tuple[Callable[[Action, Optional[dict]], TriValue], bool]:
    dead = (lambda a, c: False), False
    if not isinstance(node, list) or not node:
        errors.append(f"{where}: expected [operator, ...], got {node!r}")
        return dead
    op = node[0]

    if op in ("AND", "OR"):
        if len(node) < 2:
            errors.append(f"{where}: {op} needs at least one operand")
            return dead
        compiled = [_compile_node(child, named_lists, errors, f"{where}.{op}[{i}]") for i, child in enumerate(node[1:])]
        fns = [c[0] for c in compiled]
        uses_ctx = any(c[1] for c in compiled)
        combine = _kleene_and if op == "AND" else _kleene_or
        return (lambda a, c, _fns=fns: combine([f(a, c) for f in _fns])), uses_ctx

    if op == "NOT":
        if len(node) != 2:
            errors.append(f"{where}: NOT takes exactly one operand")
            return dead
        fn, uses_ctx = _compile_node(node[1], named_lists, errors, f"{where}.NOT")

        def negate(a: Action, c: Optional[dict], _fn=fn) -> TriValue:
            v = _fn(a, c)
            if v is INDETERMINATE:
                return INDETERMINATE
            return not v

        return negate, uses_ctx

    if op in _COMPARATORS or op in _SET_OPS or op == "MATCHES":
        if len(node) != 3:
            errors.append(f"{where}: {op} takes exactly two operands")
            return dead
        left_raw, right_raw = node[1], node[2]
        if not _is_field_path(left_raw):
            errors.append(f"{where}: left operand of {op} must be a field path, got {left_raw!r}")
            return dead
        getter, uses_ctx = _field_getter(left_raw, errors, where)
        if getter is None:
            return dead

        # resolve literal / named list on the right
        right: Any = right_raw
        if isinstance(right_raw, str) and right_raw.startswith("@"):
            name = right_raw[1:]
            if name not in named_lists:
                errors.append(f"{where}: undefined named list {right_raw!r}")
                return dead
            right = list(named_lists[name])

        if op == "MATCHES":
            if not isinstance(right, str):
                errors.append(f"{where}: MATCHES requires a string regex")
                return dead
            try:
                pattern = re.compile(right)
            except re.error as exc:
                errors.append(f"{where}: bad regex {right!r}: {exc}")
                return dead

            def matches(a: Action, c: Optional[dict], _g=getter, _p=pattern) -> TriValue:
                value = _g(a, c)
                if value is _UNPOPULATED:
                    return INDETERMINATE
                if value is _MISSING or not isinstance(value, str):
                    return False
                return _p.search(value) is not None

            return matches, uses_ctx

        if op in ("IN", "NOT_IN"):
            if not isinstance(right, list):
                errors.append(f"{where}: {op} requires a list or named list reference")
                return dead
            negated = op == "NOT_IN"

            def member(a: Action, c: Optional[dict], _g=getter, _items=right, _neg=negated) -> TriValue:
                value = _g(a, c)
                if value is _UNPOPULATED:
                    return INDETERMINATE
                if value is _MISSING:
                    return _neg  # missing key is in no list
                result = _member(value, _items)
                return (not result) if _neg else result

            return member, uses_ctx

        if op == "CONTAINS":
            def contains(a: Action, c: Optional[dict], _g=getter, _needle=right) -> TriValue:
                value = _g(a, c)
                if value is _UNPOPULATED:
                    return INDETERMINATE
                if value is _MISSING or value is None:
                    return False
                if isinstance(value, str):
                    return str(_needle).lower() in value.lower()
                if isinstance(value, (list, set, tuple)):
                    return _needle in value
                return False

            return contains, uses_ctx

        if op in ("==", "!="):
            negated = op == "!="

            def equals(a: Action, c: Optional[dict], _g=getter, _lit=right, _neg=negated) -> TriValue:
                value = _g(a, c)
                if value is _UNPOPULATED:
                    return INDETERMINATE
                if value is _MISSING:
                    return _neg
                result = value == _lit
                return (not result) if _neg else result

            return equals, uses_ctx

        # ordered comparison
        def ordered(a: Action, c: Optional[dict], _g=getter, _lit=right, _op=op) -> TriValue:
            value = _g(a, c)
            if value is _UNPOPULATED or value is _MISSING:
                return INDETERMINATE
            try:
                if _op == "<":
                    return value < _lit
                if _op == "<=":
                    return value <= _lit
                if _op == ">":
                    return value > _lit
                return value >= _lit
            except TypeError:
                return INDETERMINATE

        return ordered, uses_ctx

    errors.append(f"{where}: unknown operator {op!r}")
    return dead


def compile_predicate(node: Any, named_lists: dict[str, list[Any]], errors: list[str], where: str) -> Predicate:
    fn, uses_ctx = _compile_node(node, named_lists, errors, where)
    return Predicate(source=node, references_context=uses_ctx, _fn=fn)


@dataclass(frozen=True)
class Policy:
    id: str
    match: Predicate
    decision: DecisionKind
    priority: int
    reason: str
    forbidden: bool = False
    step_up: bool = False
    transform: tuple[tuple[str, Any], ...] = ()

    @property
    def requires_context(self) -> bool:
        return self.match.references_context

    @property
    def effective_decision(self) -> DecisionKind:
        if self.step_up and self.decision is DecisionKind.ALLOW:
            return DecisionKind.STEP_UP
        return self.decision


@dataclass(frozen=True)
class PolicyDefaults:
    unmatched_decision: DecisionKind = DecisionKind.DENY
    confidence_threshold: float = 0.5
    drift_threshold: float = 0.6


@dataclass
class PolicySet:
    policies: list[Policy]
    named_lists: dict[str, list[Any]]
    lattice: tuple[str, ...]
    defaults: PolicyDefaults
    classification_rules: ClassificationRules
    digest: str
    # forbidden policies bucketed by exact (tool, operation) for hash lookup
    _forbidden_index: dict[tuple[str, str], list[Policy]] = field(default_factory=dict)
    _forbidden_rest: list[Policy] = field(default_factory=list)
    _contextual: list[Policy] = field(default_factory=list)

    def __post_init__(self) -> None:
        for p in self.policies:
            if not p.forbidden:
                self._contextual.append(p)
                continue
            key = _static_key(p.match.source)
            if key is not None:
                self._forbidden_index.setdefault(key, []).append(p)
            else:
                self._forbidden_rest.append(p)

    def forbidden_candidates(self, action: Action) -> list[Policy]:
        bucket = self._forbidden_index.get((action.tool, action.operation), ())
        if not self._forbidden_rest:
            return list(bucket)
        return list(bucket) + self._forbidden_rest

    @property
    def contextual_policies(self) -> list[Policy]:
        return self._contextual


def _static_key(node: Any) -> Optional[tuple[str, str]]:
    """Extract an exact (tool, operation) pair from a top-level AND of
    equality tests, enabling O(1) forbidden-stage candidate lookup."""
    if not isinstance(node, list) or not node:
        return None
    clauses = node[1:] if node[0] == "AND" else [node]
    tool = operation = None
    for clause in clauses:
        if isinstance(clause, list) and len(clause) == 3 and clause[0] == "==":
            if clause[1] == "action.tool" and isinstance(clause[2], str):
                tool = clause[2]
            elif clause[1] == "action.operation" and isinstance(clause[2], str):
                operation = clause[2]
    if tool is not None and operation is not None:
        return (tool, operation)
    return None


def parse_policy_set(document: bytes | str | dict) -> PolicySet:
    """Parse and compile a policy document; all-or-nothing.

    Raises :class:`PolicyParseError` listing every problem found.
    """
    if isinstance(document, (bytes, str)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise PolicyParseError([f"line {exc.lineno}, col {exc.colno}: {exc.msg}"]) from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise PolicyParseError(["policy document must be a JSON object"])

    errors: list[str] = []
    named_lists = doc.get("named_lists", {})
    if not isinstance(named_lists, dict):
        errors.append("named_lists must be an object")
        named_lists = {}
    lattice = tuple(doc.get("lattice", DEFAULT_LATTICE))

    defaults_doc = doc.get("defaults", {})
    try:
        unmatched = DecisionKind(defaults_doc.get("unmatched_decision", "DENY"))
    except ValueError:
        errors.append(f"defaults.unmatched_decision: unknown decision {defaults_doc.get('unmatched_decision')!r}")
        unmatched = DecisionKind.DENY
    defaults = PolicyDefaults(
        unmatched_decision=unmatched,
        confidence_threshold=float(defaults_doc.get("confidence_threshold", 0.5)),
        drift_threshold=float(defaults_doc.get("drift_threshold", 0.6)),
    )

    crules_doc = doc.get("classification_rules", {})
    patterns: list[tuple[re.Pattern[str], str]] = []
    for i, entry in enumerate(crules_doc.get("patterns", [])):
        try:
            patterns.append((re.compile(entry["regex"]), entry["label"]))
        except (re.error, KeyError) as exc:
            errors.append(f"classification_rules.patterns[{i}]: {exc}")
    classification_rules = ClassificationRules(
        lattice=lattice,
        tool_map=tuple(crules_doc.get("tool_map", [])),
        patterns=tuple(patterns),
    )

    policies: list[Policy] = []
    seen_ids: set[str] = set()
    for i, pdoc in enumerate(doc.get("policies", [])):
        where = f"policies[{i}]"
        pid = pdoc.get("id")
        if not pid:
            errors.append(f"{where}: missing id")
            pid = f"<anonymous-{i}>"
        elif pid in seen_ids:
            errors.append(f"{where}: duplicate policy id {pid!r}")
        seen_ids.add(pid)
        where = f"{where}({pid})"

        try:
            decision = DecisionKind(pdoc.get("decision", ""))
        except ValueError:
            errors.append(f"{where}: unknown decision {pdoc.get('decision')!r}")
            decision = DecisionKind.DENY
        priority = int(pdoc.get("priority", 0))
        if priority < 0:
            errors.append(f"{where}: priority must be >= 0")
        forbidden = bool(pdoc.get("forbidden", False))
        step_up = bool(pdoc.get("step_up", False))
        reason = pdoc.get("reason", "")
        predicate = compile_predicate(pdoc.get("match"), named_lists, errors, f"{where}.match")

        transform: tuple[tuple[str, Any], ...] = ()
        if pdoc.get("transform"):
            transform = tuple((t["param"], t["value"]) for t in pdoc["transform"])

        if forbidden:
            if decision is not DecisionKind.DENY:
                errors.append(f"{where}: forbidden policies must carry decision DENY")
            if predicate.references_context:
                errors.append(f"{where}: forbidden policies must not reference context fields")
        if decision is DecisionKind.MODIFY and not transform:
            errors.append(f"{where}: MODIFY policies require a non-empty transform")
        if (decision in (DecisionKind.DENY, DecisionKind.DEFER, DecisionKind.STEP_UP) or step_up) and not reason:
            errors.append(f"{where}: {decision.value} policies require a reason")

        policies.append(
            Policy(
                id=pid,
                match=predicate,
                decision=decision,
                priority=priority,
                reason=reason,
                forbidden=forbidden,
                step_up=step_up,
                transform=transform,
            )
        )

    if errors:
        raise PolicyParseError(errors)

    return PolicySet(
        policies=policies,
        named_lists={k: list(v) for k, v in named_lists.items()},
        lattice=lattice,
        defaults=defaults,
        classification_rules=classification_rules,
        digest=canonical_digest(doc),
    )


def _apply_transform(parameters: dict[str, Any], transform: tuple[tuple[str, Any], ...]) -> dict[str, Any]:
    out = dict(parameters)
    for path, value in transform:
        key = path[len("params."):] if path.startswith("params.") else path
        out[key] = value
    return out


def evaluate(action: Action, ctx: Optional[dict], ps: PolicySet) -> Decision:
    """Two-stage evaluation pipeline; never raises, always yields a Decision.

    Stage 1 runs forbidden policies with context ignored; any match denies
    immediately. Stage 2 collects matching contextual policies, resolves by
    priority, and defers on conflicts, unpopulated context fields, or a
    low-confidence context-dependent allow.
    """
    ctx_confidence = 0.0
    if ctx is not None and ctx.get("original_request") is not None:
        ctx_confidence = float(ctx.get("confidence", 0.0))

    # Stage 1: forbidden (static) policies, context never consulted.
    forbidden_true = [
        p for p in ps.forbidden_candidates(action)
        if p.match.evaluate(action, CTX_UNAVAILABLE) is True
    ]
    if forbidden_true:
        forbidden_true.sort(key=lambda p: -p.priority)
        return Decision(
            kind=DecisionKind.DENY,
            matched_policies=tuple(p.id for p in forbidden_true),
            reason=forbidden_true[0].reason or "forbidden action",
            confidence=ctx_confidence,
        )

    # Stage 2: contextual policies under three-valued logic.
    true_matches: list[Policy] = []
    indeterminate: list[Policy] = []
    for p in ps.contextual_policies:
        result = p.match.evaluate(action, ctx)
        if result is True:
            true_matches.append(p)
        elif result is INDETERMINATE:
            indeterminate.append(p)

    if not true_matches:
        if indeterminate:
            # a not-yet-evaluable policy could override the default: defer
            ids = tuple(p.id for p in sorted(indeterminate, key=lambda p: -p.priority))
            return Decision(
                kind=DecisionKind.DEFER,
                matched_policies=ids,
                reason="context fields required by policy are not yet populated",
                defer_reason=DeferReason.MISSING_CONTEXT_FIELD,
                confidence=ctx_confidence,
            )
        default = ps.defaults.unmatched_decision
        if default is DecisionKind.ALLOW:
            return Decision(kind=DecisionKind.ALLOW, reason="", confidence=ctx_confidence)
        return Decision(
            kind=DecisionKind.DENY,
            reason="no policy matched (default deny)",
            confidence=ctx_confidence,
        )

    true_matches.sort(key=lambda p: -p.priority)
    matched_ids = tuple(p.id for p in true_matches)
    top_priority = true_matches[0].priority
    top = [p for p in true_matches if p.priority == top_priority]

    if len({p.effective_decision for p in top}) > 1:
        return Decision(
            kind=DecisionKind.DEFER,
            matched_policies=matched_ids,
            reason=f"policies at priority {top_priority} disagree",
            defer_reason=DeferReason.PRIORITY_CONFLICT,
            confidence=ctx_confidence,
        )

    if any(p.priority >= top_priority for p in indeterminate):
        return Decision(
            kind=DecisionKind.DEFER,
            matched_policies=matched_ids,
            reason="a policy at or above the winning priority cannot be evaluated yet",
            defer_reason=DeferReason.MISSING_CONTEXT_FIELD,
            confidence=ctx_confidence,
        )

    winner = top[0]
    kind = winner.effective_decision

    # Context-dependent allow: a context-predicated ALLOW overriding a
    # lower-priority DENY only stands when confidence clears the threshold.
    if kind is DecisionKind.ALLOW and winner.requires_context:
        overridden_deny = any(
            p.effective_decision is DecisionKind.DENY and p.priority < winner.priority
            for p in true_matches
        )
        if overridden_deny and ctx_confidence < ps.defaults.confidence_threshold:
            return Decision(
                kind=DecisionKind.DEFER,
                matched_policies=matched_ids,
                reason=f"confidence {ctx_confidence:.2f} below threshold {ps.defaults.confidence_threshold:.2f}",
                defer_reason=DeferReason.LOW_CONFIDENCE,
                confidence=ctx_confidence,
            )

    if kind is DecisionKind.MODIFY:
        return Decision(
            kind=DecisionKind.MODIFY,
            matched_policies=matched_ids,
            reason=winner.reason,
            modified_parameters=_apply_transform(action.parameters, winner.transform),
            confidence=ctx_confidence,
        )
    if kind is DecisionKind.DEFER:
        return Decision(
            kind=DecisionKind.DEFER,
            matched_policies=matched_ids,
            reason=winner.reason,
            defer_reason=DeferReason.LOW_CONFIDENCE,
            confidence=ctx_confidence,
        )
    return Decision(
        kind=kind,
        matched_policies=matched_ids,
        reason=winner.reason,
        confidence=ctx_confidence,
    )
