"""Immutable domain types shared by every pipeline stage.

Every type round-trips through ``to_dict``/``from_dict`` and the dictionaries
are what ends up, via :func:`canonical_json`, as one line of a JSONL dataset.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
PARAM_TYPES = frozenset({"string", "integer", "number", "boolean", "array", "object"})
MAX_CALLS_PER_STEP = 2


def canonical_json(value: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


class SchemaError(ValueError):
    """A tool document violates one or more structural constraints.

    ``path`` and ``reason`` describe the first problem; ``problems`` holds all
    of them as ``(path, reason)`` pairs.
    """

    def __init__(self, path: str, reason: str, problems: Sequence[tuple[str, str]] | None = None):
        self.path = path
        self.reason = reason
        self.problems = list(problems) if problems else [(path, reason)]
        super().__init__(f"{path}: {reason}")


class UnknownTypeError(SchemaError):
    pass


class StepError(ValueError):
    pass


class Origin(str, enum.Enum):
    LIVE = "Live"
    SIMULATED = "Simulated"


class Group(str, enum.Enum):
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"


class AnswerStatus(str, enum.Enum):
    PASS = "Pass"
    UNSURE = "Unsure"
    FAIL = "Fail"


class StepValidity(str, enum.Enum):
    YES = "Yes"
    NO = "No"


class Solvability(str, enum.Enum):
    SOLVABLE = "Solvable"
    UNSOLVABLE = "Unsolvable"


class Outcome(str, enum.Enum):
    """Recognition / correction verdicts."""

    PASS = "Pass"
    FAIL = "Fail"


class TerminalKind(str, enum.Enum):
    FINAL_ANSWER = "FinalAnswer"
    GIVEN_UP = "GivenUp"
    TRUNCATED = "Truncated"


class ErrorClass(str, enum.Enum):
    CALLING = "Calling"
    PLANNING = "Planning"


class ErrorSub(str, enum.Enum):
    MISSING_PARAMETER = "MissingParameter"
    TYPE_MISMATCH = "TypeMismatch"
    UNKNOWN_API = "UnknownApi"
    INVALID_PARAMETER = "InvalidParameter"
    WRONG_TOOL = "WrongTool"
    WRONG_PARAMETER_CONTENT = "WrongParameterContent"


_SUBS_BY_CLASS = {
    ErrorClass.CALLING: {
        ErrorSub.MISSING_PARAMETER,
        ErrorSub.TYPE_MISMATCH,
        ErrorSub.UNKNOWN_API,
        ErrorSub.INVALID_PARAMETER,
    },
    ErrorClass.PLANNING: {ErrorSub.WRONG_TOOL, ErrorSub.WRONG_PARAMETER_CONTENT},
}


# --------------------------------------------------------------------------- literals


def _is_scalar(v: Any) -> bool:
    if isinstance(v, float):
        return math.isfinite(v)
    return v is None or isinstance(v, (str, bool, int))


def _scalar_kind(v: Any) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, (int, float)):
        return "number"
    return "string"


def check_literal(value: Any) -> None:
    """Raise ``ValueError`` unless ``value`` belongs to the kwarg literal subset.

    Scalars, homogeneous lists of scalars, and flat string-keyed maps of
    scalars are allowed; nothing nests deeper than that.
    """
    if _is_scalar(value):
        return
    if isinstance(value, list):
        kinds = set()
        for item in value:
            if not _is_scalar(item):
                raise ValueError("list elements must be scalar literals")
            kinds.add(_scalar_kind(item))
        if len(kinds) > 1:
            raise ValueError("list literal must be homogeneous")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError("map literal keys must be strings")
            if not _is_scalar(v):
                raise ValueError("map literal values must be scalar literals")
        return
    raise ValueError(f"unsupported literal {value!r}")


# --------------------------------------------------------------------------- tools


@dataclass(frozen=True)
class Param:
    name: str
    type: str
    description: str = ""


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: tuple[Param, ...] = ()
    required: frozenset[str] = frozenset()
    origin: Origin = Origin.LIVE

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(sorted(self.parameters, key=lambda p: p.name)))
        object.__setattr__(self, "required", frozenset(self.required))
        object.__setattr__(self, "origin", Origin(self.origin))
        problems = _tool_problems(self.name, self.parameters, self.required)
        if problems:
            raise SchemaError(*problems[0], problems=problems)
        for p in self.parameters:
            if p.type not in PARAM_TYPES:
                raise UnknownTypeError(f"parameters.{p.name}.type", f"unknown type {p.type!r}")

    @property
    def param_names(self) -> frozenset[str]:
        return frozenset(p.name for p in self.parameters)

    def param(self, name: str) -> Param | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    def with_origin(self, origin: Origin) -> "ToolSpec":
        return ToolSpec(self.name, self.description, self.parameters, self.required, origin)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {p.name: {"type": p.type, "description": p.description} for p in self.parameters},
            "required": sorted(self.required),
            "origin": self.origin.value,
        }

    def to_function_doc(self) -> dict:
        """OpenAI function-calling form, the shape the refinement prompt speaks."""
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": {p.name: {"type": p.type, "description": p.description} for p in self.parameters},
                    "required": sorted(self.required),
                },
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ToolSpec":
        return validate_tool_spec(doc)


def _tool_problems(name: Any, parameters: Iterable[Param], required: Iterable[str]) -> list[tuple[str, str]]:
    problems = []
    if not isinstance(name, str) or not IDENTIFIER.match(name):
        problems.append(("name", "must be a nonempty identifier"))
    seen = set()
    for p in parameters:
        if not isinstance(p.name, str) or not IDENTIFIER.match(p.name):
            problems.append((f"parameters.{p.name}", "parameter name must be an identifier"))
        if p.name in seen:
            problems.append((f"parameters.{p.name}", "duplicate parameter name"))
        seen.add(p.name)
    for r in sorted(required, key=str):
        if r not in seen:
            problems.append(("required", "not a declared parameter"))
            break
    return problems


def _unwrap_function_doc(doc: Mapping) -> Mapping:
    # {"type": "function", "function": {...}} and JSON-schema style parameters
    if "function" in doc and isinstance(doc["function"], Mapping):
        inner = dict(doc["function"])
        if "origin" in doc and "origin" not in inner:
            inner["origin"] = doc["origin"]
        doc = inner
    params = doc.get("parameters")
    if isinstance(params, Mapping) and "properties" in params and isinstance(params["properties"], Mapping):
        doc = dict(doc)
        doc["parameters"] = params["properties"]
        if "required" not in doc:
            doc["required"] = params.get("required", [])
    return doc


def validate_tool_spec(doc: Any) -> ToolSpec:
    """Check a tool document and return its canonical :class:`ToolSpec`.

    Accepts the flat form ``{name, description, parameters, required}`` as
    well as the OpenAI ``{"type": "function", "function": ...}`` wrapper with
    JSON-schema ``properties``. All problems are collected before raising.
    """
    if not isinstance(doc, Mapping):
        raise SchemaError("$", "document must be a JSON object")
    doc = _unwrap_function_doc(doc)
    problems: list[tuple[str, str]] = []
    unknown_types: list[tuple[str, str]] = []
    for key in ("name", "description", "parameters", "required"):
        if key not in doc:
            problems.append((key, "missing field"))
    name = doc.get("name", "")
    if "name" in doc and (not isinstance(name, str) or not IDENTIFIER.match(name)):
        problems.append(("name", "must be a nonempty identifier"))
    description = doc.get("description", "")
    if not isinstance(description, str):
        problems.append(("description", "must be a string"))
        description = ""
    raw_params = doc.get("parameters", {})
    params: list[Param] = []
    if not isinstance(raw_params, Mapping):
        problems.append(("parameters", "must be an object mapping names to schemas"))
        raw_params = {}
    for pname, pdoc in raw_params.items():
        path = f"parameters.{pname}"
        if not isinstance(pname, str) or not IDENTIFIER.match(pname):
            problems.append((path, "parameter name must be an identifier"))
            continue
        if not isinstance(pdoc, Mapping):
            problems.append((path, "parameter schema must be an object"))
            continue
        ptype = pdoc.get("type")
        if ptype is None:
            problems.append((f"{path}.type", "missing field"))
            continue
        if ptype not in PARAM_TYPES:
            unknown_types.append((f"{path}.type", f"unknown type {ptype!r}"))
            continue
        pdesc = pdoc.get("description", "")
        if not isinstance(pdesc, str):
            problems.append((f"{path}.description", "must be a string"))
            pdesc = ""
        params.append(Param(pname, ptype, pdesc))
    required = doc.get("required", [])
    if not isinstance(required, (list, tuple, set, frozenset)) or not all(isinstance(r, str) for r in required):
        problems.append(("required", "must be a list of parameter names"))
        required = []
    declared = set(raw_params) if isinstance(raw_params, Mapping) else set()
    if any(r not in declared for r in required):
        problems.append(("required", "not a declared parameter"))
    origin = doc.get("origin", Origin.LIVE.value)
    try:
        origin = Origin(origin)
    except ValueError:
        problems.append(("origin", f"must be one of {[o.value for o in Origin]}"))
        origin = Origin.LIVE
    if unknown_types:
        raise UnknownTypeError(*unknown_types[0], problems=unknown_types + problems)
    if problems:
        raise SchemaError(*problems[0], problems=problems)
    return ToolSpec(name, description, tuple(params), frozenset(required), origin)


# --------------------------------------------------------------------------- calls


@dataclass(frozen=True, eq=False)
class ApiCall:
    """One tool invocation. Equality is canonical: key order is irrelevant,
    but ``1``, ``1.0`` and ``True`` are all distinct values."""

    tool_name: str
    kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.tool_name, str) or not IDENTIFIER.match(self.tool_name):
            raise ValueError(f"invalid tool name {self.tool_name!r}")
        object.__setattr__(self, "kwargs", dict(self.kwargs))
        for k, v in self.kwargs.items():
            if not isinstance(k, str) or not IDENTIFIER.match(k):
                raise ValueError(f"invalid keyword {k!r}")
            check_literal(v)

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, ApiCall):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "kwargs": dict(self.kwargs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ApiCall":
        return cls(d["tool_name"], dict(d.get("kwargs", {})))


_EMPTY_PAYLOADS = ("", "[]", "{}", "null", None)


@dataclass(frozen=True, eq=False)
class Observation:
    error: str = ""
    response: Any = ""

    def __post_init__(self):
        if not isinstance(self.error, str):
            object.__setattr__(self, "error", str(self.error))

    @property
    def ok(self) -> bool:
        return self.error == ""

    @property
    def empty(self) -> bool:
        r = self.response
        return r in _EMPTY_PAYLOADS or (isinstance(r, (list, dict)) and not r)

    def to_dict(self) -> dict:
        return {"error": self.error, "response": self.response}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        return cls(d.get("error", ""), d.get("response", ""))


# --------------------------------------------------------------------------- traces


@dataclass(frozen=True)
class Step:
    thought: str
    calls: tuple[ApiCall, ...]
    observations: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "calls", tuple(self.calls))
        object.__setattr__(self, "observations", tuple(self.observations))
        if not 1 <= len(self.calls) <= MAX_CALLS_PER_STEP:
            raise StepError(f"a step carries 1..{MAX_CALLS_PER_STEP} calls, got {len(self.calls)}")
        if len(self.observations) != len(self.calls):
            raise StepError("observations must align 1:1 with calls")

    def to_dict(self) -> dict:
        return {
            "thought": self.thought,
            "calls": [c.to_dict() for c in self.calls],
            "observations": [o.to_dict() for o in self.observations],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Step":
        return cls(
            d["thought"],
            tuple(ApiCall.from_dict(c) for c in d["calls"]),
            tuple(Observation.from_dict(o) for o in d["observations"]),
        )


@dataclass(frozen=True)
class Terminal:
    kind: TerminalKind
    text: str = ""
    thought: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", TerminalKind(self.kind))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "text": self.text, "thought": self.thought}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Terminal":
        return cls(TerminalKind(d["kind"]), d.get("text", ""), d.get("thought", ""))


@dataclass(frozen=True)
class Trace:
    steps: tuple[Step, ...]
    terminal: Terminal

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def call_count(self) -> int:
        return sum(len(s.calls) for s in self.steps)

    @property
    def actions(self) -> list[ApiCall]:
        return [c for s in self.steps for c in s.calls]

    @property
    def final_answer(self) -> str | None:
        if self.terminal.kind is TerminalKind.FINAL_ANSWER:
            return self.terminal.text
        return None

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps], "terminal": self.terminal.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trace":
        return cls(tuple(Step.from_dict(s) for s in d["steps"]), Terminal.from_dict(d["terminal"]))


# --------------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    group: Group
    tools: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "group", Group(self.group))
        object.__setattr__(self, "tools", tuple(self.tools))
        if not self.text.strip():
            raise ValueError("query text must be nonempty")
        if not self.tools:
            raise ValueError("query must reference at least one tool")

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "group": self.group.value, "tools": list(self.tools)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Query":
        return cls(str(d["id"]), d["text"], Group(d["group"]), tuple(d["tools"]))


@dataclass(frozen=True)
class ErrorKind:
    error_class: ErrorClass
    sub: ErrorSub

    def __post_init__(self):
        object.__setattr__(self, "error_class", ErrorClass(self.error_class))
        object.__setattr__(self, "sub", ErrorSub(self.sub))
        if self.sub not in _SUBS_BY_CLASS[self.error_class]:
            raise ValueError(f"{self.sub.value} is not a {self.error_class.value} error")

    @classmethod
    def calling(cls, sub: ErrorSub) -> "ErrorKind":
        return cls(ErrorClass.CALLING, sub)

    @classmethod
    def planning(cls, sub: ErrorSub) -> "ErrorKind":
        return cls(ErrorClass.PLANNING, sub)

    def to_dict(self) -> dict:
        return {"class": self.error_class.value, "sub": self.sub.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ErrorKind":
        return cls(ErrorClass(d["class"]), ErrorSub(d["sub"]))


@dataclass(frozen=True)
class VerifiedInstance:
    query: Query
    tools: tuple[ToolSpec, ...]
    trace: Trace
    answer_status: AnswerStatus = AnswerStatus.PASS
    all_steps_valid: StepValidity = StepValidity.YES

    def __post_init__(self):
        object.__setattr__(self, "tools", tuple(self.tools))
        if self.answer_status is not AnswerStatus.PASS or self.all_steps_valid is not StepValidity.YES:
            raise ValueError("verified instances require Pass and all steps valid")
        if self.trace.terminal.kind is not TerminalKind.FINAL_ANSWER:
            raise ValueError("verified instances must end in a final answer")

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "tools": [t.to_dict() for t in self.tools],
            "trace": self.trace.to_dict(),
            "verdict": {"answer_status": self.answer_status.value, "all_steps_valid": self.all_steps_valid.value},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VerifiedInstance":
        verdict = d.get("verdict", {})
        return cls(
            Query.from_dict(d["query"]),
            tuple(validate_tool_spec(t) for t in d["tools"]),
            Trace.from_dict(d["trace"]),
            AnswerStatus(verdict.get("answer_status", "Pass")),
            StepValidity(verdict.get("all_steps_valid", "Yes")),
        )


@dataclass(frozen=True)
class ReflectionInstance:
    query: Query
    tools: tuple[ToolSpec, ...]
    prefix: tuple[Step, ...]
    wrong_action: ApiCall
    wrong_observation: Observation
    reflection: str
    reference_action: ApiCall
    error_kind: ErrorKind
    wrong_thought: str = ""
    sampled_by: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tools", tuple(self.tools))
        object.__setattr__(self, "prefix", tuple(self.prefix))
        if self.wrong_action == self.reference_action:
            raise ValueError("wrong action must differ from the reference action")

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "tools": [t.to_dict() for t in self.tools],
            "prefix": [s.to_dict() for s in self.prefix],
            "wrong_thought": self.wrong_thought,
            "wrong_action": self.wrong_action.to_dict(),
            "wrong_observation": self.wrong_observation.to_dict(),
            "reflection": self.reflection,
            "reference_action": self.reference_action.to_dict(),
            "error_kind": self.error_kind.to_dict(),
            "sampled_by": self.sampled_by,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReflectionInstance":
        return cls(
            Query.from_dict(d["query"]),
            tuple(validate_tool_spec(t) for t in d["tools"]),
            tuple(Step.from_dict(s) for s in d["prefix"]),
            ApiCall.from_dict(d["wrong_action"]),
            Observation.from_dict(d["wrong_observation"]),
            d["reflection"],
            ApiCall.from_dict(d["reference_action"]),
            ErrorKind.from_dict(d["error_kind"]),
            d.get("wrong_thought", ""),
            d.get("sampled_by", ""),
        )
