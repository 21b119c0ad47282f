"""Canonical serialization: determinism, key ordering, and rejection rules."""

from __future__ import annotations

import hashlib
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aarm.canonical import SerializationError, canonical_digest, canonical_serialize

json_values = st.recursive(
    st.none()
    | st.booleans()
    | st.integers(min_value=-(2**53), max_value=2**53)
    | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(), children, max_size=4),
    max_leaves=20,
)


def test_known_vector_bytes():
    value = {"b": 1, "a": ["x", None, True], "c": {"nested": 2.5}}
    assert canonical_serialize(value) == b'{"a":["x",null,true],"b":1,"c":{"nested":2.5}}'


def test_unicode_is_not_escaped():
    assert canonical_serialize({"k": "héllo"}) == '{"k":"héllo"}'.encode("utf-8")


def test_no_insignificant_whitespace():
    out = canonical_serialize({"a": [1, 2], "b": {"c": 3}})
    assert b" " not in out and b"\n" not in out


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), float("-inf")])
def test_non_finite_rejected(bad):
    with pytest.raises(SerializationError):
        canonical_serialize({"x": bad})


def test_non_string_keys_rejected():
    with pytest.raises(SerializationError):
        canonical_serialize({1: "x"})


def test_unserializable_type_rejected():
    with pytest.raises(SerializationError):
        canonical_serialize({"x": object()})


def test_digest_is_sha256_of_canonical_bytes():
    value = {"tool": "email", "operation": "send"}
    expected = hashlib.sha256(canonical_serialize(value)).hexdigest()
    assert canonical_digest(value) == expected


def test_serializing_an_action_twice_is_byte_identical():
    action = {
        "tool": "email",
        "operation": "send",
        "parameters": {"to": "bob@company.com", "subject": "Q3", "body": "summary"},
        "seq": 3,
        "timestamp": "2026-01-01T00:00:00.000Z",
    }
    assert canonical_serialize(action) == canonical_serialize(json.loads(json.dumps(action)))
    assert canonical_digest(action) == canonical_digest(dict(reversed(list(action.items()))))


@given(json_values)
@settings(max_examples=200)
def test_serialize_is_deterministic(value):
    assert canonical_serialize(value) == canonical_serialize(value)


@given(json_values)
@settings(max_examples=200)
def test_round_trip_preserves_value(value):
    parsed = json.loads(canonical_serialize(value).decode("utf-8"))
    assert parsed == value


@given(st.dictionaries(st.text(), st.integers(), min_size=2, max_size=6))
def test_key_insertion_order_is_irrelevant(d):
    shuffled = dict(reversed(list(d.items())))
    assert canonical_serialize(d) == canonical_serialize(shuffled)


@given(json_values)
@settings(max_examples=100)
def test_keys_sorted_at_every_level(value):
    parsed = json.loads(canonical_serialize(value).decode("utf-8"))

    def check(node):
        if isinstance(node, dict):
            keys = list(node)
            assert keys == sorted(keys)
            for v in node.values():
                check(v)
        elif isinstance(node, list):
            for v in node:
                check(v)

    # json.loads preserves document order, so sortedness is observable
    check(parsed)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip_exact(x):
    out = json.loads(canonical_serialize({"x": x}).decode("utf-8"))["x"]
    assert math.isclose(out, x, rel_tol=0, abs_tol=0) or out == x
