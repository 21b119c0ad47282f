"""Drift measurement: embedder identities, descriptor stability, tracker."""

from __future__ import annotations

import math

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aarm.drift import (
    BagOfTokensEmbedder,
    DriftTracker,
    NoBaselineError,
    _fnv1a64,
    action_descriptor,
    distance,
    load_embedder,
    tokenize,
)

from conftest import make_action

EMB = BagOfTokensEmbedder()

words = st.text(alphabet="abcdefghij", min_size=1, max_size=8)
phrases = st.lists(words, min_size=1, max_size=8).map(" ".join)


def test_tokenize_lowercases_and_splits_on_non_alnum():
    assert tokenize("Clean-Up; the DB_2 now!") == ["clean", "up", "the", "db", "2", "now"]
    assert tokenize("...") == []


def test_distance_to_self_is_zero():
    action = make_action(parameters={"sql": "SELECT name FROM users"})
    text = action_descriptor(action)
    assert abs(distance(text, action, EMB)) < 1e-9


@given(phrases)
@settings(max_examples=100)
def test_distance_to_self_is_zero_property(text):
    action = make_action(parameters={"q": text})
    assert abs(distance(action_descriptor(action), action, EMB)) < 1e-9


def test_disjoint_token_sets_have_distance_one():
    action = make_action(tool="zebra", operation="quokka", parameters={"x": "walrus"})
    assert abs(distance("alpha beta gamma", action, EMB) - 1.0) < 1e-9


def test_empty_baseline_raises():
    with pytest.raises(NoBaselineError):
        distance("", make_action(), EMB)


@given(phrases, st.dictionaries(words, words, min_size=1, max_size=4))
@settings(max_examples=100)
def test_distance_within_unit_interval(baseline, params):
    d = distance(baseline, make_action(parameters=params), EMB)
    assert 0.0 <= d <= 1.0


def test_descriptor_ignores_parameter_key_order():
    a = make_action(parameters={"to": "x", "subject": "y", "body": "z"})
    b = make_action(parameters={"body": "z", "to": "x", "subject": "y"})
    assert action_descriptor(a) == action_descriptor(b)


def test_descriptor_includes_tool_operation_and_values():
    action = make_action(tool="email", operation="send",
                         parameters={"to": "Bob@Company.com", "count": 3})
    desc = action_descriptor(action)
    assert desc.startswith("email send")
    assert "bob@company.com" in desc
    assert "3" in desc


def test_descriptor_skips_booleans_and_recurses():
    action = make_action(parameters={"opts": {"dry_run": True, "label": "weekly"},
                                     "ids": [1, 2]})
    desc = action_descriptor(action)
    assert "true" not in desc
    assert "weekly" in desc and "1" in desc and "2" in desc


@given(st.lists(words, min_size=1, max_size=5, unique=True),
       st.lists(words, min_size=1, max_size=5, unique=True))
@settings(max_examples=150)
def test_distance_matches_exact_bag_cosine_when_no_bucket_collisions(a_tokens, b_tokens):
    # independent oracle: exact token-count cosine, valid only when no two
    # distinct tokens hash to the same bucket
    union = sorted(set(a_tokens) | set(b_tokens))
    buckets = {_fnv1a64(t) % EMB.dimension for t in union}
    assume(len(buckets) == len(union))
    baseline = " ".join(a_tokens)
    action = make_action(parameters={"q": " ".join(b_tokens)})
    desc_tokens = tokenize(action_descriptor(action))
    counts_a = {t: a_tokens.count(t) for t in set(a_tokens)}
    counts_b = {t: desc_tokens.count(t) for t in set(desc_tokens)}
    assume(all(_fnv1a64(t) % EMB.dimension not in
               {_fnv1a64(u) % EMB.dimension for u in set(counts_a) | set(counts_b) if u != t}
               for t in set(counts_a) | set(counts_b)))
    dot = sum(counts_a.get(t, 0) * counts_b.get(t, 0) for t in set(counts_a) | set(counts_b))
    na = math.sqrt(sum(v * v for v in counts_a.values()))
    nb = math.sqrt(sum(v * v for v in counts_b.values()))
    expected = 1.0 - min(1.0, max(0.0, dot / (na * nb)))
    got = distance(baseline, action, EMB)
    assert abs(got - expected) < 1e-9


def test_load_embedder_builtin_and_bad_config():
    assert isinstance(load_embedder("builtin-bag"), BagOfTokensEmbedder)
    assert isinstance(load_embedder(None), BagOfTokensEmbedder)
    with pytest.raises(ValueError):
        load_embedder("mystery-model")


# -------------------------------------------------------------------- tracker


def test_running_max_is_nondecreasing():
    tracker = DriftTracker("s-1", baseline="x")
    seen = []
    for d in [0.2, 0.5, 0.3, 0.55, 0.1]:
        tracker.update(d)
        seen.append(tracker.running_max)
    assert seen == sorted(seen)
    assert tracker.running_max == 0.55


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30))
def test_running_max_equals_prefix_max(ds):
    tracker = DriftTracker("s-1", baseline="x")
    for i, d in enumerate(ds):
        tracker.update(d)
        assert abs(tracker.running_max - max(ds[: i + 1])) < 1e-12


def test_escalation_is_edge_triggered():
    tracker = DriftTracker("s-1", threshold=0.6, baseline="x")
    assert tracker.update(0.5) is False
    assert tracker.update(0.7) is True   # first crossing
    assert tracker.update(0.9) is False  # already above: no repeat
    assert tracker.update(0.2) is False


def test_exact_threshold_does_not_escalate():
    tracker = DriftTracker("s-1", threshold=0.6, baseline="x")
    assert tracker.update(0.6) is False
    assert tracker.update(0.6000001) is True


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30),
       st.floats(min_value=0.1, max_value=0.9))
def test_at_most_one_escalation_ever(ds, threshold):
    tracker = DriftTracker("s-1", threshold=threshold, baseline="x")
    crossings = sum(1 for d in ds if tracker.update(d))
    assert crossings <= 1
    assert crossings == (1 if max(ds) > threshold else 0)


def test_out_of_range_distance_rejected():
    tracker = DriftTracker("s-1", baseline="x")
    with pytest.raises(ValueError):
        tracker.update(1.5)
    with pytest.raises(ValueError):
        tracker.update(-0.1)


def test_confidence_couples_to_drift():
    tracker = DriftTracker("s-1", baseline="x")
    tracker.update(0.3)
    assert abs(tracker.confidence - 0.7) < 1e-12
    tracker.update(0.8)
    assert abs(tracker.confidence - 0.2) < 1e-12


def test_confidence_zero_without_baseline():
    tracker = DriftTracker("s-1", baseline="")
    assert tracker.has_baseline is False
    assert tracker.confidence == 0.0
