"""Tagged trajectory documents and the literal-only call-expression grammar.

A document interleaves ``<thought>``, ``<execute>``, ``<final_answer>`` and
``<given_up>`` blocks. Observations travel as fenced ```` ```json ```` blocks
placed after the execute block they answer; the tokenizer skips fences so
API payloads can never be mistaken for tags.

Call expressions accept only::

    program   := { statement (NEWLINE | ";") }
    statement := "print" "(" (call | STRING) ")" | call
    call      := NAME "(" [ NAME "=" literal { "," NAME "=" literal } [","] ] ")"
    literal   := STRING | ["-"] NUMBER | True | False | None | list | map

``print("label")`` statements and ``#`` comments are accepted and ignored.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Any, Sequence

from .model import (
    ApiCall,
    MAX_CALLS_PER_STEP,
    Observation,
    Step,
    StepError,
    Terminal,
    TerminalKind,
    Trace,
    canonical_json,
)


class DslError(ValueError):
    pass


class UnclosedTag(DslError):
    def __init__(self, kind: "BlockKind", offset: int):
        self.kind, self.offset = kind, offset
        super().__init__(f"unclosed <{kind.value}> at offset {offset}")


class NestedTag(DslError):
    def __init__(self, kind: "BlockKind", offset: int):
        self.kind, self.offset = kind, offset
        super().__init__(f"nested <{kind.value}> at offset {offset}")


class ParseError(DslError):
    def __init__(self, offset: int, expected: str):
        self.offset, self.expected = offset, expected
        super().__init__(f"parse error at offset {offset}: expected {expected}")


class TooManyCalls(DslError):
    def __init__(self, count: int, limit: int):
        self.count, self.limit = count, limit
        super().__init__(f"{count} calls in one block, at most {limit} allowed")


class OrphanExecute(DslError):
    def __init__(self, offset: int | None = None):
        self.offset = offset
        super().__init__("execute block not preceded by a thought")


class DanglingObservations(DslError):
    def __init__(self, extra: int):
        self.extra = extra
        super().__init__(f"{extra} observation list(s) without an execute block")


class ObservationMismatch(DslError):
    pass


class BlockKind(str, enum.Enum):
    THOUGHT = "thought"
    EXECUTE = "execute"
    FINAL_ANSWER = "final_answer"
    GIVEN_UP = "given_up"


@dataclass(frozen=True)
class RawBlock:
    kind: BlockKind
    body: str
    span: tuple[int, int]


# --------------------------------------------------------------------------- tokenizer

_OPEN = re.compile(r"```|<(thought|execute|final_answer|given_up)>")
_FENCE = "```"


def _scan(text: str) -> list[tuple[str, str, tuple[int, int]]]:
    """Yield ``(kind, body, span)`` for tag blocks and fences in document order."""
    out = []
    pos = 0
    while True:
        m = _OPEN.search(text, pos)
        if m is None:
            return out
        if m.group(0) == _FENCE:
            close = text.find(_FENCE, m.end())
            if close < 0:
                # unterminated fence is prose
                pos = m.end()
                continue
            inner = text[m.end():close]
            nl = inner.find("\n")
            body = inner[nl + 1:] if nl >= 0 else ""
            out.append(("fence", body, (m.start(), close + 3)))
            pos = close + 3
            continue
        kind = BlockKind(m.group(1))
        open_tag, close_tag = f"<{kind.value}>", f"</{kind.value}>"
        close = text.find(close_tag, m.end())
        nested = text.find(open_tag, m.end())
        if nested >= 0 and (close < 0 or nested < close):
            raise NestedTag(kind, nested)
        if close < 0:
            raise UnclosedTag(kind, m.start())
        out.append((kind.value, text[m.end():close], (m.start(), close + len(close_tag))))
        pos = close + len(close_tag)


def tokenize_blocks(text: str) -> list[RawBlock]:
    """Split a tagged document into blocks; prose, fences and unknown tags are ignored.

    Offsets are character offsets into ``text``.
    """
    return [RawBlock(BlockKind(k), body, span) for k, body, span in _scan(text) if k != "fence"]


# --------------------------------------------------------------------------- call expressions

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>[\n;])
  | (?P<number>\d+(?:\.\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>["'])
  | (?P<punct>[()\[\]{},=:-])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "b": "\b", "f": "\f", "0": "\0", "\\": "\\", "'": "'", '"': '"', "/": "/"}
_KEYWORDS = {"True": True, "False": False, "None": None}


@dataclass
class _Tok:
    kind: str
    value: Any
    offset: int


def _read_string(code: str, start: int) -> tuple[str, int]:
    quote = code[start]
    i = start + 1
    buf = []
    while i < len(code):
        ch = code[i]
        if ch == quote:
            return "".join(buf), i + 1
        if ch == "\n":
            break
        if ch == "\\":
            if i + 1 >= len(code):
                break
            nxt = code[i + 1]
            if nxt == "u":
                digits = code[i + 2:i + 6]
                if len(digits) != 4 or not all(c in "0123456789abcdefABCDEF" for c in digits):
                    raise ParseError(i, "4 hex digits after \\u")
                buf.append(chr(int(digits, 16)))
                i += 6
                continue
            buf.append(_ESCAPES.get(nxt, "\\" + nxt))
            i += 2
            continue
        buf.append(ch)
        i += 1
    raise ParseError(len(code) if i >= len(code) else i, f"closing {quote}")


def _lex(code: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(code):
        m = _TOKEN.match(code, pos)
        if m is None:
            raise ParseError(pos, "a keyword call or literal")
        kind = m.lastgroup
        if kind == "string":
            value, end = _read_string(code, pos)
            toks.append(_Tok("string", value, pos))
            pos = end
            continue
        if kind == "number":
            text = m.group()
            toks.append(_Tok("number", float(text) if "." in text else int(text), pos))
        elif kind == "name":
            toks.append(_Tok("name", m.group(), pos))
        elif kind == "punct":
            toks.append(_Tok(m.group(), m.group(), pos))
        elif kind == "newline":
            toks.append(_Tok("sep", None, pos))
        pos = m.end()
        if kind == "number" and pos < len(code) and (code[pos].isalpha() or code[pos] in "._"):
            raise ParseError(pos, "separator after number")
    toks.append(_Tok("eof", None, len(code)))
    return toks


class _CallParser:
    def __init__(self, code: str):
        self.toks = _lex(code)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, what: str) -> _Tok:
        if self.cur.kind != kind:
            raise ParseError(self.cur.offset, what)
        return self.advance()

    def peek(self, ahead: int = 1) -> _Tok:
        return self.toks[min(self.i + ahead, len(self.toks) - 1)]

    def program(self) -> list[ApiCall]:
        calls = []
        while True:
            while self.cur.kind == "sep":
                self.advance()
            if self.cur.kind == "eof":
                return calls
            call = self.statement()
            if call is not None:
                calls.append(call)
            if self.cur.kind not in ("sep", "eof"):
                raise ParseError(self.cur.offset, "end of statement")

    def statement(self) -> ApiCall | None:
        tok = self.cur
        if tok.kind == "name" and tok.value == "print" and self.peek().kind == "(":
            self.advance()
            self.advance()
            if self.cur.kind == "string":
                self.advance()
                call = None
            else:
                call = self.call()
            self.expect(")", "')' closing print")
            return call
        return self.call()

    def call(self) -> ApiCall:
        name = self.expect("name", "function name")
        if name.value in _KEYWORDS:
            raise ParseError(name.offset, "function name")
        self.expect("(", "'('")
        kwargs: dict[str, Any] = {}
        while self.cur.kind != ")":
            key = self.expect("name", "keyword argument name")
            if key.value in _KEYWORDS:
                raise ParseError(key.offset, "keyword argument name")
            if key.value in kwargs:
                raise ParseError(key.offset, "unique keyword argument")
            self.expect("=", "'=' after keyword")
            kwargs[key.value] = self.literal(nested=False)
            if self.cur.kind == ",":
                self.advance()
            elif self.cur.kind != ")":
                raise ParseError(self.cur.offset, "',' or ')'")
        self.advance()
        try:
            return ApiCall(name.value, kwargs)
        except ValueError:
            raise ParseError(name.offset, "literal values of a supported shape") from None

    def literal(self, nested: bool) -> Any:
        tok = self.cur
        if tok.kind == "string":
            self.advance()
            return tok.value
        if tok.kind == "number":
            self.advance()
            return tok.value
        if tok.kind == "-" and self.peek().kind == "number":
            self.advance()
            return -self.advance().value
        if tok.kind == "name" and tok.value in _KEYWORDS and self.peek().kind != "(":
            self.advance()
            return _KEYWORDS[tok.value]
        if not nested and tok.kind == "[":
            return self.list_literal()
        if not nested and tok.kind == "{":
            return self.map_literal()
        raise ParseError(tok.offset, "scalar literal" if nested else "literal")

    def list_literal(self) -> list:
        self.advance()
        items = []
        while self.cur.kind != "]":
            items.append(self.literal(nested=True))
            if self.cur.kind == ",":
                self.advance()
            elif self.cur.kind != "]":
                raise ParseError(self.cur.offset, "',' or ']'")
        self.advance()
        return items

    def map_literal(self) -> dict:
        self.advance()
        out = {}
        while self.cur.kind != "}":
            key = self.expect("string", "string key")
            self.expect(":", "':'")
            out[key.value] = self.literal(nested=True)
            if self.cur.kind == ",":
                self.advance()
            elif self.cur.kind != "}":
                raise ParseError(self.cur.offset, "',' or '}'")
        self.advance()
        return out


def parse_call_expr(code: str, max_calls: int = MAX_CALLS_PER_STEP) -> list[ApiCall]:
    """Parse the contents of an execute block into keyword-only calls."""
    parser = _CallParser(code)
    calls = parser.program()
    if not calls:
        raise ParseError(len(code), "at least one call")
    if len(calls) > max_calls:
        raise TooManyCalls(len(calls), max_calls)
    return calls


# --------------------------------------------------------------------------- rendering


def _string_literal(text: str) -> str:
    # tags and fences inside a literal would end the enclosing execute block early
    return json.dumps(text, ensure_ascii=False).replace("<", "\\u003c").replace("`", "\\u0060")


def render_literal(value: Any) -> str:
    if value is True:
        return "True"
    if value is False:
        return "False"
    if value is None:
        return "None"
    if isinstance(value, str):
        return _string_literal(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        if "e" in text or "E" in text:
            text = format(Decimal(text), "f")
        if "." not in text:
            text += ".0"
        return text
    if isinstance(value, list):
        return "[" + ", ".join(render_literal(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{_string_literal(k)}: {render_literal(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot render {value!r}")


def render_call(call: ApiCall, wrap_print: bool = True) -> str:
    args = ", ".join(f"{k}={render_literal(call.kwargs[k])}" for k in sorted(call.kwargs))
    expr = f"{call.tool_name}({args})"
    return f"print({expr})" if wrap_print else expr


def render_observation(obs: Observation) -> str:
    # backticks and angle brackets can only occur inside JSON strings, so
    # escaping them keeps fences and tags unambiguous
    body = obs.to_json().replace("`", "\\u0060").replace("<", "\\u003c")
    return f"```json\n{body}\n```"


def render_step(step: Step, with_observations: bool = True) -> str:
    lines = [f"<thought>{step.thought}</thought>", "<execute>"]
    lines += [render_call(c) for c in step.calls]
    lines.append("</execute>")
    if with_observations:
        lines += [render_observation(o) for o in step.observations]
    return "\n".join(lines)


def render_terminal(terminal: Terminal) -> str:
    if terminal.kind is TerminalKind.TRUNCATED:
        return f"<thought>{terminal.thought}</thought>" if terminal.thought else ""
    tag = "final_answer" if terminal.kind is TerminalKind.FINAL_ANSWER else "given_up"
    return f"<thought>{terminal.thought}</thought>\n<{tag}>{terminal.text}</{tag}>"


def render_trace(trace: Trace) -> str:
    parts = [render_step(s) for s in trace.steps]
    tail = render_terminal(trace.terminal)
    if tail:
        parts.append(tail)
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------- assembly


def assemble_trace(blocks: Sequence[RawBlock], observations: Sequence[Sequence[Observation]]) -> Trace:
    """Pair thoughts with the blocks that follow them.

    ``observations[i]`` answers the i-th execute block. Blocks after a final
    answer or give-up are ignored.
    """
    steps = []
    pending: str | None = None
    terminal = None
    used = 0
    for block in blocks:
        if block.kind is BlockKind.THOUGHT:
            text = block.body.strip()
            pending = text if pending is None else f"{pending}\n{text}"
        elif block.kind is BlockKind.EXECUTE:
            if pending is None:
                raise OrphanExecute(block.span[0])
            calls = parse_call_expr(block.body)
            if used >= len(observations):
                raise ObservationMismatch(f"no observations for execute block at offset {block.span[0]}")
            obs = list(observations[used])
            used += 1
            if len(obs) != len(calls):
                raise ObservationMismatch(f"{len(calls)} calls but {len(obs)} observations")
            try:
                steps.append(Step(pending, tuple(calls), tuple(obs)))
            except StepError as exc:
                raise ObservationMismatch(str(exc)) from None
            pending = None
        else:
            kind = TerminalKind.FINAL_ANSWER if block.kind is BlockKind.FINAL_ANSWER else TerminalKind.GIVEN_UP
            terminal = Terminal(kind, block.body.strip(), pending or "")
            break
    if used < len(observations):
        raise DanglingObservations(len(observations) - used)
    if terminal is None:
        terminal = Terminal(TerminalKind.TRUNCATED, "", pending or "")
    return Trace(tuple(steps), terminal)


def parse_trace(text: str) -> Trace:
    """Inverse of :func:`render_trace`, reading observations from the fences."""
    blocks = []
    observations: list[list[Observation]] = []
    for kind, body, span in _scan(text):
        if kind == "fence":
            if not observations:
                continue
            try:
                doc = json.loads(body)
            except json.JSONDecodeError:
                continue
            if isinstance(doc, dict) and set(doc) == {"error", "response"}:
                observations[-1].append(Observation.from_dict(doc))
            continue
        block = RawBlock(BlockKind(kind), body, span)
        blocks.append(block)
        if block.kind is BlockKind.EXECUTE:
            observations.append([])
    return assemble_trace(blocks, observations)


def observation_text(obs: Observation, limit: int = 4096) -> str:
    """Observation envelope for a conversation turn, capped at ``limit`` chars."""
    text = canonical_json(obs.to_dict())
    if len(text) <= limit:
        return text
    marker = f" ...[truncated {len(text) - limit} chars]... "
    keep = max(limit - len(marker), 0)
    head = keep // 2
    return text[:head] + marker + text[len(text) - (keep - head):]
