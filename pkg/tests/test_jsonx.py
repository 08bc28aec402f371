import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from strategies import json_values
from toolforge.jsonx import NoJsonFound, extract_json


def test_object_after_prose():
    assert extract_json('Here you go: {"decision": "Solvable", "quality_score": 7}') == {
        "decision": "Solvable",
        "quality_score": 7,
    }


def test_fenced_block_preferred():
    assert extract_json('{"b": 2} but really ```json\n{"a":1}\n```') == {"a": 1}


def test_no_braces():
    with pytest.raises(NoJsonFound):
        extract_json("no braces here")


def test_trailing_commas_tolerated():
    assert extract_json('{"a": [1, 2,], "b": 3,}') == {"a": [1, 2], "b": 3}


def test_braces_inside_strings():
    assert extract_json('x {"a": "}{", "b": "\\"}"} y') == {"a": "}{", "b": '"}'}


def test_skips_unbalanced_prefix():
    assert extract_json('oops { not json } then {"ok": true}') == {"ok": True}


prose = st.text(st.characters(blacklist_characters="{}[]`", blacklist_categories=("Cs",)), max_size=30)


@given(prose, st.dictionaries(st.text(max_size=8), json_values, max_size=4), prose)
def test_embedded_object_round_trip(prefix, value, suffix):
    assert extract_json(prefix + json.dumps(value) + suffix) == value
