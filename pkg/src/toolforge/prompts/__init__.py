"""Bundled prompt templates.

Each ``*.txt`` asset holds a system part and a user part separated by a
``=== user ===`` line. Placeholders are written ``{{name}}`` and substituted
in a single pass, so bound values are never re-scanned.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

from ..llm import Conversation, Message, Role

PLACEHOLDER = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")
USER_MARKER = "\n=== user ===\n"


class MissingBinding(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self):
        return f"missing binding {self.name!r}"


class TemplateId(str, enum.Enum):
    EXAMPLE_GEN = "ExampleGen"
    SIMULATE = "Simulate"
    REFINE_DOC = "RefineDoc"
    QUERY_VERIFY = "QueryVerify"
    TRAJECTORY_CONSTRUCT = "TrajectoryConstruct"
    ANSWER_VERIFY = "AnswerVerify"
    REFLECTION = "Reflection"
    PASS_JUDGE = "PassJudge"
    WIN_JUDGE = "WinJudge"
    ERROR_JUDGE = "ErrorJudge"
    BRANCH_JUDGE = "BranchJudge"


_FILES = {
    TemplateId.EXAMPLE_GEN: "example_gen.txt",
    TemplateId.SIMULATE: "simulate.txt",
    TemplateId.REFINE_DOC: "refine_doc.txt",
    TemplateId.QUERY_VERIFY: "query_verify.txt",
    TemplateId.TRAJECTORY_CONSTRUCT: "trajectory_construct.txt",
    TemplateId.ANSWER_VERIFY: "answer_verify.txt",
    TemplateId.REFLECTION: "reflection.txt",
    TemplateId.PASS_JUDGE: "pass_judge.txt",
    TemplateId.WIN_JUDGE: "win_judge.txt",
    TemplateId.ERROR_JUDGE: "error_judge.txt",
    TemplateId.BRANCH_JUDGE: "branch_judge.txt",
}


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    system: str
    user: str

    @property
    def placeholders(self) -> list[str]:
        seen: list[str] = []
        for m in PLACEHOLDER.finditer(self.system + USER_MARKER + self.user):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return seen

    @property
    def raw(self) -> str:
        return self.system + USER_MARKER + self.user


def template_bytes(tid: TemplateId) -> bytes:
    return resources.files(__package__).joinpath(_FILES[TemplateId(tid)]).read_bytes()


def template_checksum(tid: TemplateId) -> str:
    return hashlib.sha256(template_bytes(tid)).hexdigest()


@lru_cache(maxsize=None)
def load_template(tid: TemplateId) -> PromptTemplate:
    tid = TemplateId(tid)
    text = template_bytes(tid).decode("utf-8")
    if USER_MARKER not in text:
        raise ValueError(f"template {tid.value} lacks a user section")
    system, user = text.split(USER_MARKER, 1)
    return PromptTemplate(tid, system, user.rstrip("\n"))


def _fill(text: str, bindings: Mapping[str, str]) -> str:
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), text)


def render_prompt(tid: TemplateId | str, bindings: Mapping[str, str]) -> Conversation:
    """Substitute ``bindings`` into a template; the result is a system + user conversation."""
    template = load_template(TemplateId(tid))
    names = template.placeholders
    for name in names:
        if name not in bindings:
            raise MissingBinding(name)
    messages = []
    if template.system.strip():
        messages.append(Message(Role.SYSTEM, _fill(template.system, bindings)))
    messages.append(Message(Role.USER, _fill(template.user, bindings)))
    used = tuple((n, str(bindings[n])) for n in names)
    return Conversation(tuple(messages), template.id.value, used)
