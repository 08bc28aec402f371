"""Chat-completion backends: OpenAI-compatible HTTP client and a scripted mock."""

from __future__ import annotations

import copy
import enum
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .jsonx import NoJsonFound, extract_json

log = logging.getLogger(__name__)


class LlmError(RuntimeError):
    pass


class TransportError(LlmError):
    """Network failure, HTTP 429 or 5xx. Retryable."""


class ScriptExhausted(LlmError):
    pass


class BudgetExceeded(LlmError):
    pass


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))

    def to_dict(self) -> dict:
        return {"role": self.role.value, "content": self.content}


@dataclass(frozen=True)
class Conversation:
    messages: tuple[Message, ...]
    template: str | None = None
    bindings: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("conversation must not be empty")
        if self.messages[0].role is Role.ASSISTANT:
            raise ValueError("conversation must start with a system or user message")

    def extend(self, *messages: Message) -> "Conversation":
        return Conversation(self.messages + tuple(messages), self.template, self.bindings)

    @property
    def last_user(self) -> str:
        for m in reversed(self.messages):
            if m.role is Role.USER:
                return m.content
        return ""

    @property
    def system(self) -> str:
        return self.messages[0].content if self.messages[0].role is Role.SYSTEM else ""

    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.messages]


@dataclass(frozen=True)
class GenParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


# judges always decode greedily
JUDGE_PARAMS = GenParams(temperature=0.0)


class Backend(Protocol):
    name: str

    def complete(self, conv: Conversation, params: GenParams) -> str: ...


# --------------------------------------------------------------------------- HTTP


class HttpBackend:
    """Client for ``POST {base}/v1/chat/completions``.

    Retries transport errors, 429 and 5xx up to ``max_retries`` times with
    exponential backoff starting at ``backoff`` seconds.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_context_chars: int | None = None,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        base = base_url.rstrip("/")
        self.url = base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_context_chars = max_context_chars
        self.sleep = sleep
        self.name = f"http:{model}"
        self.call_count = 0
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, model: str | None = None, **kwargs) -> "HttpBackend":
        base = os.environ.get("TOOLFORGE_API_BASE")
        if not base:
            raise LlmError("TOOLFORGE_API_BASE is not set")
        return cls(
            base,
            model or os.environ.get("TOOLFORGE_MODEL", "gpt-4"),
            os.environ.get("TOOLFORGE_API_KEY"),
            **kwargs,
        )

    def complete(self, conv: Conversation, params: GenParams) -> str:
        if self.max_context_chars is not None and len(conv.text()) > self.max_context_chars:
            raise BudgetExceeded(f"conversation of {len(conv.text())} chars exceeds {self.max_context_chars}")
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": conv.to_list(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        delay = self.backoff
        for attempt in range(self.max_retries + 1):
            self.call_count += 1
            try:
                resp = self._client.post(self.url, json=payload)
            except httpx.TransportError as exc:
                err: LlmError = TransportError(str(exc))
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    err = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                elif resp.status_code >= 400:
                    raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise LlmError(f"malformed completion payload: {exc}") from None
            if attempt == self.max_retries:
                raise err
            log.warning("chat completion failed (%s); retry %d in %.1fs", err, attempt + 1, delay)
            self.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def close(self):
        self._client.close()


# --------------------------------------------------------------------------- mock


@dataclass
class ScriptRule:
    """Responses served in order to conversations that match.

    ``template`` matches the conversation's template id; ``pattern`` is a
    regex searched in the last user message (``scope="last"``) or in the
    whole conversation (``scope="any"``). ``repeat`` keeps serving the final
    response once the queue is drained.
    """

    responses: list[str]
    template: str | None = None
    pattern: str | None = None
    scope: str = "last"
    repeat: bool = False
    stage: str | None = None

    def __post_init__(self):
        if self.scope not in ("last", "any"):
            raise ValueError("scope must be 'last' or 'any'")
        self._regex = re.compile(self.pattern) if self.pattern else None

    def matches(self, conv: Conversation) -> bool:
        if self.template is not None and conv.template != self.template:
            return False
        if self._regex is None:
            return True
        haystack = conv.last_user if self.scope == "last" else conv.text()
        return self._regex.search(haystack) is not None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"responses": list(self.responses)}
        for key in ("template", "pattern", "stage"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.scope != "last":
            d["scope"] = self.scope
        if self.repeat:
            d["repeat"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptRule":
        return cls(
            list(d["responses"]),
            d.get("template"),
            d.get("pattern"),
            d.get("scope", "last"),
            bool(d.get("repeat", False)),
            d.get("stage"),
        )


class MockBackend:
    """Deterministic scripted backend.

    Each rule keeps its own cursor, so conversations belonging to different
    tasks (keyed by pattern) never steal each other's responses regardless
    of scheduling. The first matching rule with responses left wins.
    """

    def __init__(self, script: Sequence[str] | Iterable[ScriptRule], name: str = "mock"):
        script = list(script)
        if script and all(isinstance(s, str) for s in script):
            script = [ScriptRule(list(script))]
        self.rules: list[ScriptRule] = script
        self.cursors = [0] * len(self.rules)
        self.name = name
        self.calls: list[tuple[str | None, float]] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def complete(self, conv: Conversation, params: GenParams) -> str:
        with self._lock:
            self.calls.append((conv.template, params.temperature))
            for i, rule in enumerate(self.rules):
                if not rule.matches(conv):
                    continue
                if self.cursors[i] < len(rule.responses):
                    self.cursors[i] += 1
                    return rule.responses[self.cursors[i] - 1]
                if rule.repeat and rule.responses:
                    return rule.responses[-1]
        raise ScriptExhausted(f"no scripted response for template={conv.template} last_user={conv.last_user[:120]!r}")

    def fork(self) -> "MockBackend":
        """Same script, fresh cursors."""
        return MockBackend(copy.deepcopy(self.rules), self.name)

    @property
    def unused(self) -> int:
        return sum(len(r.responses) - c for r, c in zip(self.rules, self.cursors) if not r.repeat)

    @classmethod
    def from_file(cls, path: str | Path, stage: str | None = None, name: str | None = None) -> "MockBackend":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [ScriptRule.from_dict(r) for r in doc["rules"]]
        if stage is not None:
            rules = [r for r in rules if r.stage in (None, stage)]
        return cls(rules, name or f"mock:{Path(path).name}")


# --------------------------------------------------------------------------- structured output


def complete_json(
    backend: Backend,
    conv: Conversation,
    parse: Callable[[Any], Any],
    params: GenParams = JUDGE_PARAMS,
    reask: str = "Your previous reply could not be used: {error}. Reply again with only the JSON object in the required format.",
) -> tuple[Any, str]:
    """Ask for JSON, validate it with ``parse`` and re-ask once on failure.

    Returns ``(parsed, raw_text)``; ``parsed`` is ``None`` if both attempts
    fail. ``parse`` signals rejection by raising ``ValueError``.
    """
    text = backend.complete(conv, params)
    error = ""
    for attempt in range(2):
        try:
            return parse(extract_json(text)), text
        except NoJsonFound:
            error = "no JSON object found"
        except (ValueError, KeyError, TypeError) as exc:
            error = str(exc) or type(exc).__name__
        if attempt == 0:
            conv = conv.extend(Message(Role.ASSISTANT, text), Message(Role.USER, reask.format(error=error)))
            text = backend.complete(conv, params)
    log.warning("structured output rejected twice (%s) for template %s", error, conv.template)
    return None, text
