import pytest

from toolforge.llm import Role
from toolforge.prompts import MissingBinding, TemplateId, load_template, render_prompt, template_checksum

# Frozen when the templates were transcribed; any edit to a prompt asset must update this table.
CHECKSUMS = {
    "ExampleGen": "48490267045498d4056189f1339d1d9102ef69e6add4d64d095cb1ff14f25c65",
    "Simulate": "356ec4619bfde4a775e7c2c3695c5963406fd5a42c73b5ded0fa41a14c84f50e",
    "RefineDoc": "3fa4175f423136a13875984f816277305fba9ab79dcc517c7ba809f34131bfe4",
    "QueryVerify": "47753f1facb5382d572645b3cb0e8f85f1404199034f6478c91e25b89a6fcf3c",
    "TrajectoryConstruct": "9ac3ed41adac7b95bce2285156c54ea89faf5a3c1cd85b0f496df069c55df55d",
    "AnswerVerify": "cc98939706abac96ef9450a43ddaf2b462db7500a534d528b37eae752e3d09a1",
    "Reflection": "f05cf95e0e87e37ee0abfc600d470b785b71efc6f37360c587936fb35e2893f3",
    "PassJudge": "f6826d56dae19a7cfb8c2b62374059a635ab59b44716ecacd2615197e9aa607d",
    "WinJudge": "023fbbf8fdda92ebc41a9b5cc91bece6489972d2ed8b7f60206a0be6c3de3ef4",
    "ErrorJudge": "8cc91ab5275985b030787bc987ec6c9629b766b9a41b11a21e6f1ac7d58e07c0",
    "BranchJudge": "cf67c59977f40eba1efdbfb40938889c6df4acb67d7cfb650a9d39977bcc76bf",
}


@pytest.mark.parametrize("tid", list(TemplateId))
def test_template_checksums(tid):
    assert template_checksum(tid) == CHECKSUMS[tid.value]


def test_query_verify_rules():
    conv = render_prompt(TemplateId.QUERY_VERIFY, {"query": "q", "tools": "t"})
    assert conv.messages[0].role is Role.SYSTEM
    assert 'return "Unsolvable"' in conv.system
    assert conv.last_user == "Query: q\nAvailable tools:\nt"


def test_simulate_carries_envelope_skeleton():
    conv = render_prompt(TemplateId.SIMULATE, {"api_doc": "doc", "api_input": "{}"})
    assert '"error": "",' in conv.system
    assert '"response": "<Your_Response>"' in conv.system


def test_missing_binding():
    with pytest.raises(MissingBinding) as err:
        render_prompt(TemplateId.PASS_JUDGE, {})
    assert err.value.name == "query"


def test_single_pass_substitution():
    conv = render_prompt(TemplateId.WIN_JUDGE, {"query": "{{answer_1}}", "answer_0": "a", "answer_1": "b"})
    assert "Original query: {{answer_1}}" in conv.last_user


@pytest.mark.parametrize("tid", list(TemplateId))
def test_every_template_renders(tid):
    names = load_template(tid).placeholders
    conv = render_prompt(tid, {n: f"<{n}>" for n in names})
    for n in names:
        assert f"<{n}>" in conv.text()


def test_injective_bindings():
    a = render_prompt(TemplateId.QUERY_VERIFY, {"query": "a", "tools": "bc"})
    b = render_prompt(TemplateId.QUERY_VERIFY, {"query": "ab", "tools": "c"})
    assert a.text() != b.text()
