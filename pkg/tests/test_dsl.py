import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import bad_call_corpus, random_ascii, traces
from toolforge.dsl import (
    BlockKind,
    DslError,
    NestedTag,
    ObservationMismatch,
    OrphanExecute,
    ParseError,
    RawBlock,
    TooManyCalls,
    UnclosedTag,
    assemble_trace,
    parse_call_expr,
    parse_trace,
    render_call,
    render_trace,
    tokenize_blocks,
)
from toolforge.model import ApiCall, Observation, Step, Terminal, TerminalKind, Trace


def test_tokenize_minimal_document():
    blocks = tokenize_blocks("<thought>plan</thought><execute>print(f())</execute>")
    assert [(b.kind, b.body) for b in blocks] == [(BlockKind.THOUGHT, "plan"), (BlockKind.EXECUTE, "print(f())")]


def test_tokenize_final_answer_and_prose():
    blocks = tokenize_blocks("intro <thought>x</thought> between <foo>y</foo><final_answer>done</final_answer>")
    assert [b.kind for b in blocks] == [BlockKind.THOUGHT, BlockKind.FINAL_ANSWER]


def test_unclosed_and_nested():
    with pytest.raises(UnclosedTag) as err:
        tokenize_blocks("<execute>print(f()")
    assert err.value.kind is BlockKind.EXECUTE
    with pytest.raises(NestedTag):
        tokenize_blocks("<thought>a<thought>b</thought></thought>")


def test_spans_ordered_and_disjoint():
    text = "<thought>a</thought>\n<execute>f()</execute>\n<thought>b</thought><given_up>x</given_up>"
    spans = [b.span for b in tokenize_blocks(text)]
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


@settings(max_examples=300)
@given(st.text(max_size=200))
def test_tokenize_is_total(text):
    try:
        tokenize_blocks(text)
    except DslError:
        pass


def test_ticket_query_call():
    calls = parse_call_expr('print(ticket_info_query(destination="Beijing", travel_mode="Train"))')
    assert calls == [ApiCall("ticket_info_query", {"destination": "Beijing", "travel_mode": "Train"})]


def test_single_airplane_call_has_integer_id():
    [call] = parse_call_expr("print(single_airplane_for_airplanesdb(is_id=1))")
    assert call == ApiCall("single_airplane_for_airplanesdb", {"is_id": 1})
    assert type(call.kwargs["is_id"]) is int


def test_bare_call_and_literals():
    [call] = parse_call_expr("f(a='x\\ty', b=-2.5, c=True, d=None, e=[1, 2], m={'k': 'v'},)")
    assert call.kwargs == {"a": "x\ty", "b": -2.5, "c": True, "d": None, "e": [1, 2], "m": {"k": "v"}}


def test_truncated_input_offset():
    with pytest.raises(ParseError) as err:
        parse_call_expr("foo(bar=")
    assert err.value.offset == 8
    assert "literal" in err.value.expected


def test_too_many_calls():
    with pytest.raises(TooManyCalls):
        parse_call_expr("f()\ng()\nh()")


def test_labels_and_comments_ignored():
    code = 'print("Example 1:")\n# first\nprint(f(x=1))\nprint("Example 2:")\nprint(g(y=2))'
    assert [c.tool_name for c in parse_call_expr(code)] == ["f", "g"]


@pytest.mark.parametrize("code", ["f(1)", "f(x=g())", "f(x=1+1)", "f(x=y)", "print(f(x=1), 2)", "f(**kw)"])
def test_rejections(code):
    with pytest.raises(DslError):
        parse_call_expr(code)


def test_fuzz_corpus_rejected():
    for body in bad_call_corpus(600, seed=3):
        with pytest.raises(DslError):
            parse_call_expr(body)


def test_random_garbage_never_crashes():
    rng = random.Random(11)
    for _ in range(500):
        try:
            parse_call_expr(random_ascii(rng.randrange(1, 40), rng))
        except DslError:
            pass


def _obs(x="ok"):
    return Observation("", x)


def test_assemble_single_step_truncated():
    blocks = tokenize_blocks("<thought>a</thought><execute>f()</execute>")
    trace = assemble_trace(blocks, [[_obs()]])
    assert len(trace.steps) == 1 and trace.terminal.kind is TerminalKind.TRUNCATED


def test_assemble_with_final_answer():
    blocks = tokenize_blocks("<thought>a</thought><execute>f()</execute><thought>b</thought><final_answer>x</final_answer>")
    trace = assemble_trace(blocks, [[_obs()]])
    assert trace.terminal == Terminal(TerminalKind.FINAL_ANSWER, "x", "b")


def test_assemble_orphan_execute():
    with pytest.raises(OrphanExecute):
        assemble_trace([RawBlock(BlockKind.EXECUTE, "f()", (0, 10))], [[_obs()]])


def test_assemble_observation_count_mismatch():
    blocks = tokenize_blocks("<thought>a</thought><execute>f()</execute>")
    with pytest.raises(ObservationMismatch):
        assemble_trace(blocks, [[_obs(), _obs()]])


def test_render_one_step():
    trace = Trace((Step("t", (ApiCall("f"),), (_obs(),)),), Terminal(TerminalKind.TRUNCATED))
    text = render_trace(trace)
    assert text.count("<thought>") == 1 and text.count("<execute>") == 1


def test_render_given_up_ends_with_tag():
    trace = Trace((), Terminal(TerminalKind.GIVEN_UP, "no", "cannot"))
    assert render_trace(trace).rstrip().endswith("</given_up>")


def test_hostile_strings_round_trip():
    call = ApiCall("f", {"x": "</execute> ``` <thought>", "m": {"<k>": 1}})
    trace = Trace((Step("a", (call,), (Observation("<x>", "```"),)),), Terminal(TerminalKind.FINAL_ANSWER, "d", "t"))
    assert parse_trace(render_trace(trace)) == trace


@settings(max_examples=300, deadline=None)
@given(traces)
def test_render_parse_round_trip(trace):
    assert parse_trace(render_trace(trace)) == trace


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_literals_round_trip(x):
    [call] = parse_call_expr(render_call(ApiCall("f", {"x": x})))
    assert call.kwargs["x"] == x
