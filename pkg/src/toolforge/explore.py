"""Step-level exploration of verified trajectories and reflection mining.

At an exploration point ``t`` the agent sees the episode up to observation
``o_t`` and proposes alternatives to the reference action ``a_{t+1}``.
Failed alternatives, with their error feedback, are turned into
reflections whose corrected call is exactly the reference action.
"""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .apihub import Executor, tools_doc_text
from .dsl import BlockKind, DslError, parse_call_expr, render_call, render_step, tokenize_blocks
from .forge import Action, episode_conversation, execute_call, parse_turn
from .llm import JUDGE_PARAMS, Backend, GenParams, Message, Role, complete_json
from .model import (
    ApiCall,
    ErrorKind,
    ErrorSub,
    Observation,
    ReflectionInstance,
    Step,
    Trace,
    VerifiedInstance,
)
from .prompts import TemplateId, render_prompt

log = logging.getLogger(__name__)

DEFAULT_K = 2
DEFAULT_N = 4
DEFAULT_TEMPERATURE = 0.9

_ERROR_PATTERNS = [
    (re.compile(r"missing|required|incomplete", re.I), ErrorSub.MISSING_PARAMETER),
    (re.compile(r"type|format|mismatch", re.I), ErrorSub.TYPE_MISMATCH),
    (re.compile(r"doesn't exist|does not exist|unknown|not found", re.I), ErrorSub.UNKNOWN_API),
]


class ReflectionDropped(Exception):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class ExploreConfig:
    k: int = DEFAULT_K
    n: int = DEFAULT_N
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    per_call_timeout: float | None = 30.0

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be positive")


@dataclass(frozen=True)
class BranchOutcome:
    """One sampled alternative; ``error_kind`` is ``None`` for a Success."""

    origin_step: int
    sampled_action: ApiCall
    observation: Observation
    error_kind: ErrorKind | None
    thought: str = ""
    sampled_by: str = ""

    @property
    def success(self) -> bool:
        return self.error_kind is None

    def to_dict(self) -> dict:
        return {
            "origin_step": self.origin_step,
            "sampled_action": self.sampled_action.to_dict(),
            "observation": self.observation.to_dict(),
            "disposition": "Success" if self.success else {"Failure": self.error_kind.to_dict()},
            "thought": self.thought,
            "sampled_by": self.sampled_by,
        }


# --------------------------------------------------------------------------- exploration points


def eligible_points(trace: Trace) -> list[int]:
    """Step indices followed by another action step."""
    return list(range(max(len(trace.steps) - 1, 0)))


def pick_exploration_points(trace: Trace, k: int, rng_seed: Any, salt: str = "") -> list[int]:
    if k < 1:
        raise ValueError("k must be positive")
    eligible = eligible_points(trace)
    rng = random.Random(f"{rng_seed}:{salt}")
    return sorted(rng.sample(eligible, min(k, len(eligible))))


def reference_calls(trace: Trace, t: int) -> tuple[ApiCall, ...]:
    if t not in eligible_points(trace):
        raise ValueError(f"step {t} has no successor action")
    return trace.steps[t + 1].calls


# --------------------------------------------------------------------------- classification


def classify_error(wa: ApiCall, wo: Observation, ra: ApiCall) -> ErrorKind:
    """Calling errors come from the envelope's error text; silent failures are planning errors."""
    if wo.error:
        for pattern, sub in _ERROR_PATTERNS:
            if pattern.search(wo.error):
                return ErrorKind.calling(sub)
        return ErrorKind.calling(ErrorSub.INVALID_PARAMETER)
    if wa.tool_name != ra.tool_name:
        return ErrorKind.planning(ErrorSub.WRONG_TOOL)
    return ErrorKind.planning(ErrorSub.WRONG_PARAMETER_CONTENT)


def _parse_relevance(obj: Any) -> bool:
    if not isinstance(obj, dict):
        raise ValueError("judgement must be a JSON object")
    value = obj.get("task_relevant")
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("yes", "no"):
        return value.strip().lower() == "yes"
    raise ValueError("'task_relevant' must be yes or no")


def judge_relevance(query_text: str, wa: ApiCall, wo: Observation, ra: ApiCall, judge: Backend) -> bool:
    conv = render_prompt(
        TemplateId.BRANCH_JUDGE,
        {
            "query": query_text,
            "reference_action": render_call(ra, wrap_print=False),
            "sampled_action": render_call(wa, wrap_print=False),
            "observation": wo.to_json(),
        },
    )
    verdict, _ = complete_json(judge, conv, _parse_relevance, JUDGE_PARAMS)
    if verdict is None:
        log.warning("malformed relevance judgement for %s; treating as irrelevant", wa.tool_name)
        return False
    return verdict


def dispose(
    query_text: str, wa: ApiCall, wo: Observation, refs: Sequence[ApiCall], judge: Backend | None
) -> ErrorKind | None:
    ra = refs[0]
    if wa in refs:
        return None
    if wo.error or wo.empty:
        return classify_error(wa, wo, ra)
    if judge is None or judge_relevance(query_text, wa, wo, ra, judge):
        return None
    return classify_error(wa, wo, ra)


# --------------------------------------------------------------------------- sampling


def sample_branches(
    instance: VerifiedInstance,
    t: int,
    agent_backend: Backend,
    executor: Executor,
    n: int,
    judge_backend: Backend | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    per_call_timeout: float | None = 30.0,
) -> list[BranchOutcome]:
    """Up to ``n`` parsed alternatives at point ``t`` (at most ``2n`` attempts)."""
    trace = instance.trace
    refs = reference_calls(trace, t)
    conv = episode_conversation(instance.query, instance.tools, trace.steps[: t + 1])
    params = GenParams(temperature=temperature)
    outcomes: list[BranchOutcome] = []
    for _ in range(2 * n):
        if len(outcomes) == n:
            break
        text = agent_backend.complete(conv, params)
        try:
            turn = parse_turn(text)
        except DslError:
            continue
        if not isinstance(turn, Action):
            continue
        wa = turn.calls[0]
        wo = execute_call(executor, wa, per_call_timeout)
        kind = dispose(instance.query.text, wa, wo, refs, judge_backend)
        outcomes.append(BranchOutcome(t, wa, wo, kind, turn.thought, getattr(agent_backend, "name", "")))
    return outcomes


# --------------------------------------------------------------------------- reflections


def right_iteration(step: Step) -> str:
    return f"<thought>{step.thought}</thought>\n<execute>\n{render_call(step.calls[0])}\n</execute>"


def check_reflection(text: str, ra: ApiCall) -> str:
    """Return the reflection's thought text or raise ``ValueError`` with the violation."""
    try:
        blocks = tokenize_blocks(text)
    except DslError as exc:
        raise ValueError(f"malformed tags: {exc}") from None
    thoughts = [b for b in blocks if b.kind is BlockKind.THOUGHT]
    executes = [b for b in blocks if b.kind is BlockKind.EXECUTE]
    if len(thoughts) != 1 or len(executes) != 1 or len(blocks) != 2:
        raise ValueError("reflection needs exactly one thought and one execute block")
    try:
        calls = parse_call_expr(executes[0].body)
    except DslError as exc:
        raise ValueError(f"unparseable execute block: {exc}") from None
    if len(calls) != 1 or calls[0] != ra:
        raise ValueError("reflection diverges from reference")
    thought = thoughts[0].body.strip()
    if not thought:
        raise ValueError("empty reflection thought")
    return thought


def generate_reflection(
    instance: VerifiedInstance, branch: BranchOutcome, backend: Backend, params: GenParams = GenParams()
) -> str:
    t = branch.origin_step
    steps = instance.trace.steps
    ra = steps[t + 1].calls[0]
    wrong = Step(branch.thought, (branch.sampled_action,), (branch.observation,))
    conv = render_prompt(
        TemplateId.REFLECTION,
        {
            "tools": tools_doc_text(instance.tools),
            "query": instance.query.text,
            "previous_iterations": "\n".join(render_step(s) for s in steps[: t + 1]),
            "wrong_iteration": render_step(wrong),
            "right_iteration": right_iteration(steps[t + 1]),
        },
    )
    text = backend.complete(conv, params)
    try:
        return check_reflection(text, ra)
    except ValueError as exc:
        retry = conv.extend(
            Message(Role.ASSISTANT, text),
            Message(Role.USER, f"Your reflection was rejected: {exc}. Reply with one <thought> and one <execute> holding the correct call."),
        )
        try:
            return check_reflection(backend.complete(retry, params), ra)
        except ValueError as exc2:
            raise ReflectionDropped(str(exc2)) from None


# --------------------------------------------------------------------------- dataset


@dataclass
class ExploreReport:
    points: int = 0
    branches: int = 0
    successes: int = 0
    failures: int = 0
    reflections: int = 0
    dropped: list[dict] = field(default_factory=list)
    kinds: dict[str, int] = field(default_factory=dict)

    def merge(self, other: "ExploreReport") -> None:
        self.points += other.points
        self.branches += other.branches
        self.successes += other.successes
        self.failures += other.failures
        self.reflections += other.reflections
        self.dropped += other.dropped
        for key, count in other.kinds.items():
            self.kinds[key] = self.kinds.get(key, 0) + count

    def to_dict(self) -> dict:
        return {
            "points": self.points,
            "branches": self.branches,
            "successes": self.successes,
            "failures": self.failures,
            "reflections": self.reflections,
            "dropped": self.dropped,
            "kinds": dict(sorted(self.kinds.items())),
        }


@dataclass(frozen=True)
class ExploreBackends:
    agent: Backend
    judge: Backend | None = None
    reflector: Backend | None = None


def explore_instance(
    instance: VerifiedInstance, config: ExploreConfig, backends: ExploreBackends, executor: Executor
) -> tuple[list[ReflectionInstance], ExploreReport]:
    report = ExploreReport()
    out: list[ReflectionInstance] = []
    trace = instance.trace
    reflector = backends.reflector or backends.judge or backends.agent
    for t in pick_exploration_points(trace, config.k, config.seed, instance.query.id):
        report.points += 1
        branches = sample_branches(
            instance, t, backends.agent, executor, config.n, backends.judge, config.temperature, config.per_call_timeout
        )
        for branch in branches:
            report.branches += 1
            if branch.success:
                report.successes += 1
                continue
            report.failures += 1
            key = f"{branch.error_kind.error_class.value}.{branch.error_kind.sub.value}"
            report.kinds[key] = report.kinds.get(key, 0) + 1
            try:
                reflection = generate_reflection(instance, branch, reflector)
            except ReflectionDropped as exc:
                report.dropped.append({"query": instance.query.id, "step": t, "reason": exc.reason})
                continue
            report.reflections += 1
            out.append(
                ReflectionInstance(
                    instance.query,
                    instance.tools,
                    trace.steps[: t + 1],
                    branch.sampled_action,
                    branch.observation,
                    reflection,
                    trace.steps[t + 1].calls[0],
                    branch.error_kind,
                    branch.thought,
                    branch.sampled_by,
                )
            )
    return out, report


def build_reflection_dataset(
    instances: Sequence[VerifiedInstance],
    config: ExploreConfig,
    backends: ExploreBackends,
    executor_for: Callable[[VerifiedInstance], Executor],
    workers: int = 1,
) -> tuple[list[ReflectionInstance], ExploreReport]:
    """Reflections in (instance, point, branch) order regardless of ``workers``."""
    if not instances:
        raise ValueError("no verified instances to explore")
    task = lambda inst: explore_instance(inst, config, backends, executor_for(inst))  # noqa: E731
    if workers <= 1:
        results = [task(i) for i in instances]
    else:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, instances))
    dataset: list[ReflectionInstance] = []
    report = ExploreReport()
    for items, part in results:
        dataset += items
        report.merge(part)
    return dataset, report
