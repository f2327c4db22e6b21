from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import retrieval_oracle

from phishintent.core import CATEGORIES, SchemaError
from phishintent.kb import (
    DuplicateId,
    PatternEntry,
    load_kb,
    load_starter_kb,
    parse_kb,
    rank_entries,
    retrieve_basic,
    retrieve_specialist,
    starter_kb_path,
    validate_kb,
)

CT, FF, MD, PIH = CATEGORIES

WORDS = ["login", "password", "form", "pay", "card", "download", "install", "urgent", "verify", "address"]


def entry(entry_id, tags=("x",), indicators=(), description="d"):
    return {"id": entry_id, "description": description, "tags": list(tags), "indicators": list(indicators)}


def minimal_kb() -> dict:
    return {
        "version": "t",
        "basic": {
            "common_patterns": [entry("c1", ["login", "form"])],
            "visual_deception": [entry("v1", ["popup"])],
            "text_patterns": [entry("t1", ["urgent"], ["act now"])],
        },
        "specialist": {
            c.value: {
                "primary_features": [entry(f"{c.value}_f1", ["feature"])],
                "targets": [f"{c.value} target"],
                "techniques": [],
                "indicators": [],
            }
            for c in CATEGORIES
        },
    }


def write(tmp_path, data) -> str:
    path = tmp_path / "kb.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_starter_kb_loads_clean():
    kb = load_starter_kb()
    assert set(kb.specialist) == set(CATEGORIES)
    assert validate_kb(kb) == []
    assert all(kb.specialist[c].primary_features for c in CATEGORIES)


def test_load_is_order_independent_for_same_bytes():
    assert load_kb(starter_kb_path()) == load_kb(starter_kb_path())


def test_missing_specialist_section_is_schema_error(tmp_path):
    data = minimal_kb()
    del data["specialist"]["malware_distribution"]
    with pytest.raises(SchemaError) as err:
        load_kb(write(tmp_path, data))
    assert "specialist" in err.value.location or "malware_distribution" in str(err.value)


def test_wrong_type_names_json_path(tmp_path):
    data = minimal_kb()
    data["basic"]["text_patterns"][0]["tags"] = "urgent"
    with pytest.raises(SchemaError) as err:
        load_kb(write(tmp_path, data))
    assert err.value.location == "$.basic.text_patterns[0].tags"


def test_duplicate_id_raises(tmp_path):
    data = minimal_kb()
    data["basic"]["visual_deception"].append(entry("c1", ["login"]))
    with pytest.raises(DuplicateId) as err:
        load_kb(write(tmp_path, data))
    assert err.value.entry_id == "c1"


def test_validate_reports_empty_tags():
    data = minimal_kb()
    data["basic"]["common_patterns"][0]["tags"] = []
    assert [(v.code, v.subject) for v in validate_kb(parse_kb(data))] == [("EmptyTags", "c1")]


def test_validate_reports_empty_primary_features():
    data = minimal_kb()
    data["specialist"]["financial_fraud"]["primary_features"] = []
    assert [(v.code, v.subject) for v in validate_kb(parse_kb(data))] == [
        ("EmptyPrimaryFeatures", "financial_fraud")
    ]


def test_validate_reports_empty_section_and_description():
    data = minimal_kb()
    data["basic"]["visual_deception"] = []
    data["basic"]["text_patterns"][0]["description"] = " "
    codes = {v.code for v in validate_kb(parse_kb(data))}
    assert codes == {"EmptySection", "EmptyDescription"}


def test_kb_is_immutable():
    kb = load_starter_kb()
    with pytest.raises(TypeError):
        kb.specialist[CT] = None
    with pytest.raises(AttributeError):
        kb.version = "x"


def test_retrieve_basic_single_overlap_first():
    kb = parse_kb(minimal_kb())
    assert [e.id for e in retrieve_basic(kb, {"login", "password"}, 5)] == ["c1"]


def test_retrieve_basic_no_overlap_is_empty():
    assert retrieve_basic(parse_kb(minimal_kb()), {"nothing"}, 5) == []


def test_tie_break_by_id():
    entries = [PatternEntry("a2", "d", frozenset({"k"})), PatternEntry("a1", "d", frozenset({"k"}))]
    assert [e.id for e in rank_entries(entries, {"k"}, 5)] == ["a1", "a2"]


def test_indicator_phrase_matches_joined_terms():
    kb = parse_kb(minimal_kb())
    # "act now" is found in the sorted, space-joined terms "act now"
    assert [e.id for e in retrieve_basic(kb, {"act now"}, 5)] == ["t1"]


def test_limit_must_be_positive():
    with pytest.raises(ValueError):
        retrieve_basic(parse_kb(minimal_kb()), {"login"}, 0)


def test_specialist_bundle_with_empty_query():
    kb = load_starter_kb()
    bundle = retrieve_specialist(kb, MD, set(), 5)
    assert bundle.primary_features == kb.specialist[MD].primary_features
    assert bundle.targets == kb.specialist[MD].targets
    assert bundle.scored == ()


def test_specialist_technique_match():
    data = minimal_kb()
    data["specialist"]["credential_theft"]["techniques"] = [entry("ct_m_login", ["login"])]
    bundle = retrieve_specialist(parse_kb(data), CT, {"login"}, 5)
    assert [e.id for e in bundle.scored] == ["ct_m_login"]


def test_specialist_limit_keeps_best():
    data = minimal_kb()
    data["specialist"]["credential_theft"]["indicators"] = [
        entry("i3", ["a", "b", "c"]), entry("i2", ["a", "b"]), entry("i1", ["a"]),
    ]
    bundle = retrieve_specialist(parse_kb(data), CT, {"a", "b", "c"}, 1)
    assert [e.id for e in bundle.scored] == ["i3"]


entry_strategy = st.tuples(
    st.sets(st.sampled_from(WORDS), min_size=1, max_size=4),
    st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=2).map(" ".join), max_size=3),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(entry_strategy, max_size=50), st.sets(st.sampled_from(WORDS), max_size=6),
       st.integers(1, 60), st.randoms())
def test_ranking_matches_brute_force(specs, terms, limit, rnd):
    ids = [f"e{i:02d}" for i in range(len(specs))]
    rnd.shuffle(ids)
    entries = [PatternEntry(i, "d", frozenset(tags), tuple(ind)) for i, (tags, ind) in zip(ids, specs)]
    got = [e.id for e in rank_entries(entries, terms, limit)]
    want = retrieval_oracle([(e.id, e.tags, e.indicators) for e in entries], terms, limit)
    assert got == want


@settings(max_examples=100, deadline=None)
@given(st.lists(entry_strategy, max_size=50), st.sets(st.sampled_from(WORDS), max_size=6), st.integers(1, 50))
def test_limit_prefix_monotone(specs, terms, k):
    entries = [PatternEntry(f"e{i:02d}", "d", frozenset(t), tuple(ind)) for i, (t, ind) in enumerate(specs)]
    shorter = rank_entries(entries, terms, k)
    longer = rank_entries(entries, terms, k + 1)
    assert longer[: len(shorter)] == shorter


def test_retrieval_is_deterministic():
    kb = load_starter_kb()
    terms = {"login", "password", "sign in", "download now"}
    assert retrieve_basic(kb, terms, 8) == retrieve_basic(kb, set(sorted(terms, reverse=True)), 8)


def test_round_trip_through_dict():
    kb = load_starter_kb()
    assert parse_kb(copy.deepcopy(kb.to_dict())) == kb
