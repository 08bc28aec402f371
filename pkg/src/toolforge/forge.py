"""Plan/act/observe episodes and the checks that admit them into the verified dataset."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .apihub import Executor, tools_doc_text
from .dsl import BlockKind, DslError, ParseError, observation_text, parse_call_expr, render_step, render_trace, tokenize_blocks
from .llm import Backend, Conversation, GenParams, Message, Role, complete_json
from .model import (
    MAX_CALLS_PER_STEP,
    AnswerStatus,
    ApiCall,
    Observation,
    Query,
    Step,
    StepValidity,
    Terminal,
    TerminalKind,
    ToolSpec,
    Trace,
    VerifiedInstance,
)
from .prompts import TemplateId, render_prompt

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 12
OBSERVATION_LIMIT = 4096
REASK = (
    "Your last reply could not be parsed: {error}. Reply with one <thought> block followed by "
    "exactly one <execute>, <final_answer> or <given_up> block."
)


@dataclass(frozen=True)
class EpisodeLimits:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_calls_per_iteration: int = MAX_CALLS_PER_STEP
    per_call_timeout: float | None = 30.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.max_calls_per_iteration != MAX_CALLS_PER_STEP:
            raise ValueError(f"max_calls_per_iteration is fixed at {MAX_CALLS_PER_STEP}")
        if self.per_call_timeout is not None and self.per_call_timeout <= 0:
            raise ValueError("per_call_timeout must be positive")


# --------------------------------------------------------------------------- conversation


def observation_turn(observations: Sequence[Observation]) -> str:
    return "\n".join(f"Observation: {observation_text(o, OBSERVATION_LIMIT)}" for o in observations)


def episode_conversation(query: Query, tools: Sequence[ToolSpec], steps: Sequence[Step] = ()) -> Conversation:
    """The agent's view after ``steps``: each step is an assistant turn answered by its observations."""
    conv = render_prompt(TemplateId.TRAJECTORY_CONSTRUCT, {"tools": tools_doc_text(tools), "query": query.text})
    turns: list[Message] = []
    for step in steps:
        turns.append(Message(Role.ASSISTANT, render_step(step, with_observations=False)))
        turns.append(Message(Role.USER, observation_turn(step.observations)))
    return conv.extend(*turns)


@dataclass(frozen=True)
class Action:
    thought: str
    calls: tuple[ApiCall, ...]


def parse_turn(text: str) -> Action | Terminal:
    """Read one assistant turn: thoughts followed by the first action or terminal block."""
    pending: str | None = None
    for block in tokenize_blocks(text):
        if block.kind is BlockKind.THOUGHT:
            body = block.body.strip()
            pending = body if pending is None else f"{pending}\n{body}"
            continue
        if pending is None:
            raise ParseError(block.span[0], "a <thought> block before the action")
        if block.kind is BlockKind.EXECUTE:
            return Action(pending, tuple(parse_call_expr(block.body)))
        kind = TerminalKind.FINAL_ANSWER if block.kind is BlockKind.FINAL_ANSWER else TerminalKind.GIVEN_UP
        return Terminal(kind, block.body.strip(), pending)
    raise ParseError(len(text), "an <execute>, <final_answer> or <given_up> block")


def execute_call(executor: Executor, call: ApiCall, timeout: float | None) -> Observation:
    """Run one call; timeouts and crashes come back as error envelopes."""
    if timeout is None:
        try:
            return executor(call)
        except Exception as exc:
            return Observation(f"Execution error: {type(exc).__name__}: {exc}", "")
    box: dict[str, Any] = {}

    def target():
        try:
            box["obs"] = executor(call)
        except Exception as exc:
            box["exc"] = exc

    worker = threading.Thread(target=target, daemon=True)
    worker.start()
    worker.join(timeout)
    if worker.is_alive():
        return Observation(f"Timeout: no response within {timeout:g}s", "")
    if "exc" in box:
        exc = box["exc"]
        return Observation(f"Execution error: {type(exc).__name__}: {exc}", "")
    return box["obs"]


def run_episode(
    query: Query,
    tools: Sequence[ToolSpec],
    agent_backend: Backend,
    executor: Executor,
    limits: EpisodeLimits = EpisodeLimits(),
    params: GenParams = GenParams(),
    initial_steps: Sequence[Step] = (),
) -> Trace:
    """Drive the agent until it answers, gives up or exhausts ``limits.max_iterations``.

    ``initial_steps`` seed the history (used to replay injected errors);
    they do not count against the iteration budget.
    """
    steps: list[Step] = list(initial_steps)
    for _ in range(limits.max_iterations):
        conv = episode_conversation(query, tools, steps)
        text = agent_backend.complete(conv, params)
        try:
            turn = parse_turn(text)
        except DslError as exc:
            log.info("query %s: unparseable turn (%s); re-asking", query.id, exc)
            retry = conv.extend(Message(Role.ASSISTANT, text), Message(Role.USER, REASK.format(error=exc)))
            try:
                turn = parse_turn(agent_backend.complete(retry, params))
            except DslError as exc2:
                log.info("query %s: second unparseable turn (%s); truncating", query.id, exc2)
                return Trace(tuple(steps), Terminal(TerminalKind.TRUNCATED))
        if isinstance(turn, Terminal):
            return Trace(tuple(steps), turn)
        observations = tuple(execute_call(executor, c, limits.per_call_timeout) for c in turn.calls)
        steps.append(Step(turn.thought, turn.calls, observations))
    return Trace(tuple(steps), Terminal(TerminalKind.TRUNCATED))


# --------------------------------------------------------------------------- verification


def check_format(trace: Trace) -> bool:
    if trace.terminal.kind is not TerminalKind.FINAL_ANSWER or not trace.terminal.text.strip():
        return False
    return all(
        1 <= len(s.calls) <= MAX_CALLS_PER_STEP and len(s.calls) == len(s.observations) for s in trace.steps
    )


def find_duplicate(trace: Trace) -> ApiCall | None:
    """A call repeated within a step or between adjacent steps, if any."""
    previous: set[ApiCall] = set()
    for step in trace.steps:
        current: set[ApiCall] = set()
        for call in step.calls:
            if call in current or call in previous:
                return call
            current.add(call)
        previous = current
    return None


@dataclass(frozen=True)
class TraceVerdict:
    format_ok: bool
    answer_status: AnswerStatus
    all_steps_valid: StepValidity
    judge_rationale: str = ""

    def to_dict(self) -> dict:
        return {
            "format_ok": self.format_ok,
            "answer_status": self.answer_status.value,
            "all_steps_valid": self.all_steps_valid.value,
            "judge_rationale": self.judge_rationale,
        }


def _lookup(enum_type, value: Any):
    if isinstance(value, bool) and enum_type is StepValidity:
        return StepValidity.YES if value else StepValidity.NO
    if not isinstance(value, str):
        raise ValueError(f"expected a string, got {value!r}")
    for member in enum_type:
        if member.value.lower() == value.strip().lower():
            return member
    raise ValueError(f"unknown value {value!r}")


def parse_answer_verdict(obj: Any) -> tuple[AnswerStatus, StepValidity, str]:
    if not isinstance(obj, dict):
        raise ValueError("verdict must be a JSON object")
    status = _lookup(AnswerStatus, obj.get("answer_status"))
    validity = _lookup(StepValidity, obj.get("all_steps_validity"))
    return status, validity, str(obj.get("content", ""))


def verify_trace(query: Query, trace: Trace, judge_backend: Backend, format_ok: bool | None = None) -> TraceVerdict:
    """Format check, duplicate pre-filter, then one answer-and-steps judge call."""
    if format_ok is None:
        format_ok = check_format(trace)
    if not format_ok:
        return TraceVerdict(False, AnswerStatus.FAIL, StepValidity.NO, f"format check failed ({trace.terminal.kind.value})")
    dup = find_duplicate(trace)
    if dup is not None:
        return TraceVerdict(True, AnswerStatus.UNSURE, StepValidity.NO, f"repeated call {dup.canonical()}")
    conv = render_prompt(TemplateId.ANSWER_VERIFY, {"query": query.text, "trace": render_trace(trace)})
    parsed, _ = complete_json(judge_backend, conv, parse_answer_verdict)
    if parsed is None:
        log.warning("query %s: malformed answer verdict twice; failing closed", query.id)
        return TraceVerdict(True, AnswerStatus.UNSURE, StepValidity.NO, "malformed judge output")
    status, validity, rationale = parsed
    return TraceVerdict(True, status, validity, rationale)


def rejection_reason(trace: Trace, verdict: TraceVerdict) -> str | None:
    if not verdict.format_ok:
        return "format check failed"
    if verdict.answer_status is not AnswerStatus.PASS:
        return f"answer status {verdict.answer_status.value}"
    if verdict.all_steps_valid is not StepValidity.YES:
        return "invalid or redundant steps"
    if trace.call_count == 0:
        return "no API call"
    if find_duplicate(trace) is not None:
        return "repeated call"
    return None


def admit_instance(
    query: Query, tools: Sequence[ToolSpec], trace: Trace, verdict: TraceVerdict
) -> VerifiedInstance | None:
    reason = rejection_reason(trace, verdict)
    if reason is not None:
        log.info("query %s rejected: %s", query.id, reason)
        return None
    return VerifiedInstance(query, tuple(tools), trace)


# --------------------------------------------------------------------------- batch


@dataclass(frozen=True)
class EpisodeResult:
    query: Query
    trace: Trace
    verdict: TraceVerdict
    instance: VerifiedInstance | None

    @property
    def reason(self) -> str | None:
        return rejection_reason(self.trace, self.verdict)

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "trace": self.trace.to_dict(),
            "verdict": self.verdict.to_dict(),
            "admitted": self.instance is not None,
            "reason": self.reason,
        }


def forge_one(
    query: Query,
    tools: Sequence[ToolSpec],
    agent_backend: Backend,
    judge_backend: Backend,
    executor: Executor,
    limits: EpisodeLimits = EpisodeLimits(),
) -> EpisodeResult:
    trace = run_episode(query, tools, agent_backend, executor, limits)
    verdict = verify_trace(query, trace, judge_backend)
    return EpisodeResult(query, trace, verdict, admit_instance(query, tools, trace, verdict))


def forge_batch(
    queries: Sequence[Query],
    tools_for: Callable[[Query], Sequence[ToolSpec]],
    agent_backend: Backend,
    judge_backend: Backend,
    executor_for: Callable[[Query], Executor],
    limits: EpisodeLimits = EpisodeLimits(),
    workers: int = 1,
) -> list[EpisodeResult]:
    """Episodes are independent; results keep input order."""
    task = lambda q: forge_one(q, tools_for(q), agent_backend, judge_backend, executor_for(q), limits)  # noqa: E731
    if workers <= 1:
        return [task(q) for q in queries]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(task, queries))
