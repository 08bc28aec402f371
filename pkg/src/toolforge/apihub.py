"""API registry, validation probes, simulation and documentation refinement."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import httpx

from .dsl import DslError, ParseError, parse_call_expr, render_call
from .llm import Backend, GenParams, Message, Role, complete_json
from .model import (
    ApiCall,
    Observation,
    Origin,
    SchemaError,
    ToolSpec,
    canonical_json,
    validate_tool_spec,
)
from .prompts import TemplateId, render_prompt

log = logging.getLogger(__name__)

Executor = Callable[[ApiCall], Observation]

API_MISSING = "API doesn't exist"
MAX_PROBE_SAMPLES = 3
SIM_RANGE = 1000
_DATE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_CODE_FENCE = re.compile(r"```[ \t]*(?:python|py)?[ \t]*\n(.*?)```", re.DOTALL)


class EnvelopeError(ValueError):
    pass


class RefineRejected(UserWarning):
    pass


class BindError(OSError):
    pass


def tool_doc_text(spec: ToolSpec) -> str:
    return json.dumps(spec.to_function_doc(), ensure_ascii=False, sort_keys=True)


def tools_doc_text(specs: Iterable[ToolSpec]) -> str:
    return "\n".join(tool_doc_text(s) for s in specs)


# --------------------------------------------------------------------------- call checking

_TYPE_CHECKS: dict[str, Callable[[Any], bool]] = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "array": lambda v: isinstance(v, list),
    "object": lambda v: isinstance(v, dict),
}


def _json_type(v: Any) -> str:
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "array"
    if isinstance(v, dict):
        return "object"
    return "null"


def check_call(spec: ToolSpec, call: ApiCall) -> Observation | None:
    """Error envelope for a call that breaks the tool's contract, else ``None``."""
    unknown = sorted(k for k in call.kwargs if spec.param(k) is None)
    if unknown:
        return Observation(
            "Invalid API Request",
            f"The parameters provided do not match with any of our API requirements: unexpected parameter '{unknown[0]}'",
        )
    for name in sorted(spec.required):
        if call.kwargs.get(name) is None:
            return Observation(f"Missing required parameter: {name}", "")
    for name, value in call.kwargs.items():
        if value is None:
            continue
        param = spec.param(name)
        if not _TYPE_CHECKS[param.type](value):
            return Observation(
                f"Type mismatch for parameter '{name}': expected {param.type}, got {_json_type(value)}", ""
            )
        if param.type == "string" and "YYYY-MM-DD" in param.description and not _DATE.match(value):
            return Observation(f"Wrong date format for parameter '{name}': expected YYYY-MM-DD", "")
    return None


# --------------------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Deterministic:
    seed: int = 0


@dataclass(frozen=True)
class LlmBacked:
    backend: Backend


class _Hasher:
    def __init__(self, spec: ToolSpec, call: ApiCall, seed: int):
        self.base = canonical_json([spec.name, call.kwargs, seed]).encode()

    def int(self, label: str) -> int:
        return int.from_bytes(hashlib.sha256(self.base + b"\x00" + label.encode()).digest()[:8], "big")

    def token(self, label: str) -> str:
        return f"{label}_{self.int(label) % 16**6:06x}"


def _fabricate(ptype: str, name: str, h: _Hasher) -> Any:
    if ptype == "string":
        return h.token(name)
    if ptype == "integer":
        return h.int(name) % SIM_RANGE
    if ptype == "number":
        return (h.int(name) % (SIM_RANGE * 100)) / 100
    if ptype == "boolean":
        return h.int(name) % 2 == 1
    if ptype == "array":
        return [h.token(name)]
    return {"value": h.token(name)}


def deterministic_response(spec: ToolSpec, call: ApiCall, seed: int) -> Observation:
    """Schema-shaped synthetic response; a pure function of (spec, call, seed).

    Supplied values are echoed and unsupplied parameters are fabricated from
    a hash. Integers outside ``[0, 1000)`` address nothing and yield an
    empty ``"[]"`` payload, mimicking a lookup with no match.
    """
    for name, value in call.kwargs.items():
        param = spec.param(name)
        if param.type == "integer" and isinstance(value, int) and not 0 <= value < SIM_RANGE:
            return Observation("", "[]")
    h = _Hasher(spec, call, seed)
    body: dict[str, Any] = {}
    for p in spec.parameters:
        value = call.kwargs.get(p.name)
        body[p.name] = value if value is not None else _fabricate(p.type, p.name, h)
    body.setdefault("result", f"{spec.name}-{h.int('result') % 16**8:08x}")
    return Observation("", body)


def _parse_envelope(obj: Any) -> Observation:
    if not isinstance(obj, dict) or "error" not in obj or "response" not in obj:
        raise ValueError("reply must be an object with 'error' and 'response' keys")
    error = obj["error"]
    return Observation("" if error is None else str(error), obj["response"])


def simulate_call(spec: ToolSpec, call: ApiCall, mode: Deterministic | LlmBacked) -> Observation:
    """Answer ``call`` without touching the real API."""
    if call.tool_name != spec.name:
        raise ValueError(f"call to {call.tool_name} routed to simulator for {spec.name}")
    problem = check_call(spec, call)
    if problem is not None:
        return problem
    if isinstance(mode, Deterministic):
        return deterministic_response(spec, call, mode.seed)
    conv = render_prompt(
        TemplateId.SIMULATE, {"api_doc": tool_doc_text(spec), "api_input": canonical_json(call.kwargs)}
    )
    obs, raw = complete_json(mode.backend, conv, _parse_envelope)
    if obs is None:
        raise EnvelopeError(f"simulator reply lacks the error/response envelope: {raw[:120]!r}")
    return obs


# --------------------------------------------------------------------------- registry & executors


class ToolRegistry:
    """Thread-safe name -> ToolSpec map; writes are serialized."""

    def __init__(self, specs: Iterable[ToolSpec] = ()):
        self._specs: dict[str, ToolSpec] = {}
        self._lock = threading.RLock()
        for s in specs:
            self.put(s)

    def put(self, spec: ToolSpec) -> None:
        with self._lock:
            self._specs[spec.name] = spec

    def get(self, name: str) -> ToolSpec | None:
        return self._specs.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter([self._specs[k] for k in sorted(self._specs)])

    def subset(self, names: Iterable[str]) -> list[ToolSpec]:
        return [self._specs[n] for n in names if n in self._specs]

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "ToolRegistry":
        specs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                specs.append(validate_tool_spec(json.loads(line)))
        return cls(specs)


class RegistryExecutor:
    """Dispatch calls by tool origin: live upstream for ``Live`` tools, simulator otherwise.

    ``mode`` is ``"auto"`` (by origin), ``"sim"`` or ``"live"``. Upstream
    transport failures become error envelopes.
    """

    def __init__(
        self,
        registry: ToolRegistry,
        sim: Deterministic | LlmBacked = Deterministic(0),
        upstream: Executor | None = None,
        mode: str = "auto",
        allowed: Iterable[str] | None = None,
    ):
        if mode not in ("auto", "sim", "live"):
            raise ValueError(f"unknown mode {mode!r}")
        self.registry = registry
        self.sim = sim
        self.upstream = upstream
        self.mode = mode
        self.allowed = frozenset(allowed) if allowed is not None else None

    def restrict(self, names: Iterable[str]) -> "RegistryExecutor":
        return RegistryExecutor(self.registry, self.sim, self.upstream, self.mode, names)

    def __call__(self, call: ApiCall) -> Observation:
        spec = self.registry.get(call.tool_name)
        if spec is None or (self.allowed is not None and call.tool_name not in self.allowed):
            return Observation(API_MISSING, "")
        live = self.mode == "live" or (self.mode == "auto" and spec.origin is Origin.LIVE and self.upstream)
        if not live:
            try:
                return simulate_call(spec, call, self.sim)
            except EnvelopeError as exc:
                return Observation(f"Simulator error: {exc}", "")
        if self.upstream is None:
            return Observation("No live upstream configured", "")
        try:
            return self.upstream(call)
        except (ConnectionError, TimeoutError, httpx.TransportError) as exc:
            return Observation(f"Upstream unavailable: {exc or type(exc).__name__}", "")


class FixtureUpstream:
    """Offline stand-in for real APIs.

    ``behaviors`` maps tool name to ``"ok"``, ``"error:<message>"``,
    ``"flaky"`` (transport failure on odd call hashes) or ``"timeout"``.
    """

    def __init__(self, registry: ToolRegistry, behaviors: Mapping[str, str], seed: int = 0):
        self.registry = registry
        self.behaviors = dict(behaviors)
        self.seed = seed

    def __call__(self, call: ApiCall) -> Observation:
        spec = self.registry.get(call.tool_name)
        if spec is None:
            return Observation(API_MISSING, "")
        behavior = self.behaviors.get(call.tool_name, "ok")
        if behavior.startswith("error:"):
            return Observation(behavior[len("error:"):], "")
        if behavior == "timeout":
            raise TimeoutError(f"{call.tool_name} timed out")
        if behavior == "flaky":
            digest = hashlib.sha256(call.canonical().encode()).digest()
            if digest[0] % 2:
                raise ConnectionError(f"connection reset by {call.tool_name}")
        return simulate_call(spec, call, Deterministic(self.seed))


class HttpExecutor:
    """Executes calls against a running registry service."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout)

    def __call__(self, call: ApiCall) -> Observation:
        try:
            resp = self._client.post(f"{self.base_url}/api/{call.tool_name}", json=call.kwargs)
        except httpx.TimeoutException as exc:
            raise TimeoutError(str(exc)) from exc
        except httpx.TransportError as exc:
            raise ConnectionError(str(exc)) from exc
        try:
            return Observation.from_dict(resp.json())
        except (ValueError, AttributeError):
            return Observation(f"HTTP {resp.status_code}: malformed envelope", "")

    def close(self):
        self._client.close()


# --------------------------------------------------------------------------- probing


class ProbeClass(str, enum.Enum):
    VALID = "Valid"
    INVALID = "Invalid"
    FLAKY = "Flaky"


@dataclass(frozen=True)
class ProbeReport:
    tool: ToolSpec
    samples: tuple[tuple[ApiCall, Observation], ...]
    classification: ProbeClass
    reason: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not 1 <= len(self.samples) <= MAX_PROBE_SAMPLES:
            raise ValueError(f"a probe carries 1..{MAX_PROBE_SAMPLES} samples")

    def to_dict(self) -> dict:
        return {
            "tool": self.tool.name,
            "classification": self.classification.value,
            "reason": self.reason,
            "samples": [{"call": c.to_dict(), "observation": o.to_dict()} for c, o in self.samples],
        }


def example_calls(text: str, tool_name: str) -> list[ApiCall]:
    """Calls to ``tool_name`` found in an example-generation reply."""
    blocks = _CODE_FENCE.findall(text) or [text]
    calls = []
    for block in blocks:
        calls += parse_call_expr(block, max_calls=MAX_PROBE_SAMPLES)
    if len(calls) > MAX_PROBE_SAMPLES:
        raise ParseError(0, f"at most {MAX_PROBE_SAMPLES} example calls")
    calls = [c for c in calls if c.tool_name == tool_name]
    if not calls:
        raise ParseError(0, f"an example call to {tool_name}")
    return calls


def request_examples(spec: ToolSpec, backend: Backend, params: GenParams = GenParams(temperature=0.7)) -> list[ApiCall]:
    """Ask for up to three sample calls, re-asking once on a parse failure."""
    conv = render_prompt(TemplateId.EXAMPLE_GEN, {"api_name": spec.name, "api_doc": tool_doc_text(spec)})
    text = backend.complete(conv, params)
    try:
        return example_calls(text, spec.name)
    except DslError as exc:
        log.info("unparseable examples for %s (%s); re-asking", spec.name, exc)
        conv = conv.extend(
            Message(Role.ASSISTANT, text),
            Message(Role.USER, f"Your examples could not be parsed: {exc}. Use only keyword arguments with literal values."),
        )
        return example_calls(backend.complete(conv, params), spec.name)


def _run(executor: Executor, call: ApiCall) -> tuple[Observation, bool]:
    try:
        return executor(call), False
    except (ConnectionError, TimeoutError, httpx.TransportError) as exc:
        return Observation(f"Transport error: {exc or type(exc).__name__}", ""), True


def classify_samples(samples: Sequence[tuple[Observation, bool]]) -> tuple[ProbeClass, str]:
    successes = [o for o, t in samples if not t and o.ok and o.response not in ("", None)]
    transport = any(t for _, t in samples)
    hard = [o for o, t in samples if not t and not (o.ok and o.response not in ("", None))]
    if successes:
        return (ProbeClass.FLAKY, "mixed transport failures and successes") if transport else (ProbeClass.VALID, "")
    if hard:
        first = hard[0]
        return ProbeClass.INVALID, first.error or "empty response"
    return ProbeClass.FLAKY, "all samples hit transport failures"


def probe_api(spec: ToolSpec, agent_backend: Backend, executor: Executor) -> ProbeReport:
    calls = request_examples(spec, agent_backend)
    results = [_run(executor, c) for c in calls]
    classification, reason = classify_samples(results)
    return ProbeReport(spec, tuple(zip(calls, (o for o, _ in results))), classification, reason)


def apply_probe(spec: ToolSpec, report: ProbeReport) -> ToolSpec:
    """Unusable APIs are routed to the simulator."""
    return spec.with_origin(Origin.LIVE if report.classification is ProbeClass.VALID else Origin.SIMULATED)


# --------------------------------------------------------------------------- refinement


@dataclass(frozen=True)
class RefineOutcome:
    is_api_valid: bool
    refined: ToolSpec | None = None
    rejection: str | None = None

    def __post_init__(self):
        if self.refined is not None and not self.is_api_valid:
            raise ValueError("a refined document implies a valid API")

    def to_dict(self) -> dict:
        return {
            "is_api_valid": self.is_api_valid,
            "refined": self.refined.to_dict() if self.refined else None,
            "rejection": self.rejection,
        }


def _parse_refine_reply(obj: Any) -> dict:
    if not isinstance(obj, dict) or not isinstance(obj.get("is_api_valid"), bool):
        raise ValueError("reply must carry a boolean 'is_api_valid'")
    return obj


def check_refinement(original: ToolSpec, doc: Any) -> ToolSpec:
    """Validate a refined document; raise ``ValueError`` naming the violated constraint."""
    try:
        refined = validate_tool_spec(doc)
    except SchemaError as exc:
        raise ValueError(f"invalid refined document: {exc}") from None
    if refined.name != original.name:
        raise ValueError("API name changed")
    if refined.param_names != original.param_names:
        if len(refined.param_names) == len(original.param_names):
            raise ValueError("parameter name changed")
        raise ValueError("parameters added or removed")
    if refined.required != original.required:
        raise ValueError("required set changed")
    if any(refined.param(p.name).type != p.type for p in original.parameters):
        raise ValueError("parameter type changed")
    return refined.with_origin(original.origin)


def refine_doc(spec: ToolSpec, report: ProbeReport, backend: Backend) -> RefineOutcome:
    """Improve descriptions from observed behavior; names and required sets are immutable."""
    if report.tool.name != spec.name:
        raise ValueError("probe report belongs to another tool")
    observed = "\n".join(f"{render_call(c, wrap_print=False)}\n-> {o.to_json()}" for c, o in report.samples)
    conv = render_prompt(
        TemplateId.REFINE_DOC, {"api_name": spec.name, "api_doc": tool_doc_text(spec), "api_calls": observed}
    )
    reply, _ = complete_json(backend, conv, _parse_refine_reply)
    fallback_valid = report.classification is ProbeClass.VALID
    if reply is None:
        return _reject(spec, fallback_valid, "unparseable refinement reply")
    if not reply["is_api_valid"]:
        return RefineOutcome(False, None)
    if "refine_api" not in reply:
        return RefineOutcome(True, None)
    try:
        refined = check_refinement(spec, reply["refine_api"])
    except ValueError as exc:
        return _reject(spec, fallback_valid, str(exc))
    return RefineOutcome(True, refined)


def _reject(spec: ToolSpec, is_valid: bool, reason: str) -> RefineOutcome:
    warnings.warn(RefineRejected(f"{spec.name}: {reason}"), stacklevel=3)
    log.warning("refinement of %s rejected: %s", spec.name, reason)
    return RefineOutcome(is_valid, None, reason)
