"""Metrics, LLM judges and forging of error-injection benchmark cases."""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Sequence

from .apihub import Executor, request_examples
from .dsl import DslError, render_step, render_trace
from .forge import EpisodeLimits, execute_call, run_episode
from .llm import JUDGE_PARAMS, Backend, complete_json
from .model import (
    AnswerStatus,
    ApiCall,
    Observation,
    Origin,
    Outcome,
    Query,
    Step,
    TerminalKind,
    ToolSpec,
    Trace,
    VerifiedInstance,
)
from .prompts import TemplateId, render_prompt

log = logging.getLogger(__name__)

STATUS_SCORE = {AnswerStatus.PASS: Fraction(1), AnswerStatus.UNSURE: Fraction(1, 2), AnswerStatus.FAIL: Fraction(0)}
MAX_REDRAWS = 3


class EmptyInput(ValueError):
    pass


class UnsolvableCase(Exception):
    pass


def _nonempty(items: Sequence, what: str) -> list:
    items = list(items)
    if not items:
        raise EmptyInput(f"{what} must not be empty")
    return items


# --------------------------------------------------------------------------- metrics


def pass_rate(statuses: Iterable[AnswerStatus]) -> float:
    """Mean score with Pass=1, Unsure=0.5, Fail=0 (computed exactly, rounded once)."""
    statuses = _nonempty(statuses, "statuses")
    return float(sum((STATUS_SCORE[AnswerStatus(s)] for s in statuses), Fraction(0)) / len(statuses))


@dataclass(frozen=True)
class Comparison:
    better_index: int
    rationale: str = ""
    swapped: bool = False

    def __post_init__(self):
        if self.better_index not in (0, 1):
            raise ValueError("better_index must be 0 or 1")

    def to_dict(self) -> dict:
        return {"better_index": self.better_index, "rationale": self.rationale, "swapped": self.swapped}


def win_rate(comparisons: Iterable[Comparison], candidate_index: int = 0) -> float:
    comparisons = _nonempty(comparisons, "comparisons")
    if candidate_index not in (0, 1):
        raise ValueError("candidate_index must be 0 or 1")
    return float(Fraction(sum(c.better_index == candidate_index for c in comparisons), len(comparisons)))


@dataclass(frozen=True)
class ErrorJudgement:
    recognition: Outcome
    correction: Outcome
    rationale: str = ""

    def __post_init__(self):
        object.__setattr__(self, "recognition", Outcome(self.recognition))
        object.__setattr__(self, "correction", Outcome(self.correction))
        if self.correction is Outcome.PASS and self.recognition is not Outcome.PASS:
            raise ValueError("correction cannot pass without recognition")

    def to_dict(self) -> dict:
        return {"recognition": self.recognition.value, "correction": self.correction.value, "rationale": self.rationale}


def err_ecr(judgements: Iterable[ErrorJudgement]) -> tuple[float, float]:
    judgements = _nonempty(judgements, "judgements")
    n = len(judgements)
    recognised = sum(j.recognition is Outcome.PASS for j in judgements)
    corrected = sum(j.recognition is Outcome.PASS and j.correction is Outcome.PASS for j in judgements)
    return float(Fraction(recognised, n)), float(Fraction(corrected, n))


def avg_api_calls(traces: Iterable[Trace]) -> float:
    traces = _nonempty(traces, "traces")
    return float(Fraction(sum(t.call_count for t in traces), len(traces)))


# --------------------------------------------------------------------------- judges


def _member(enum_type, value: Any):
    if isinstance(value, str):
        for m in enum_type:
            if m.value.lower() == value.strip().lower():
                return m
    raise ValueError(f"unexpected value {value!r}")


@dataclass(frozen=True)
class PassJudgement:
    status: AnswerStatus
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status.value, "rationale": self.rationale}


def _parse_pass(obj: Any) -> PassJudgement:
    if not isinstance(obj, dict):
        raise ValueError("judgement must be a JSON object")
    return PassJudgement(_member(AnswerStatus, obj.get("answer_status")), str(obj.get("content", "")))


def judge_pass(query: Query, final_answer: str, trace_text: str, judge_backend: Backend) -> PassJudgement:
    conv = render_prompt(
        TemplateId.PASS_JUDGE, {"query": query.text, "final_answer": final_answer, "trace": trace_text}
    )
    verdict, _ = complete_json(judge_backend, conv, _parse_pass, JUDGE_PARAMS)
    if verdict is None:
        log.warning("query %s: malformed pass judgement; Unsure", query.id)
        return PassJudgement(AnswerStatus.UNSURE, "malformed judge output")
    return verdict


def judge_trace_pass(query: Query, trace: Trace, judge_backend: Backend) -> PassJudgement:
    """Traces without a final answer fail outright; others go to the judge."""
    if trace.terminal.kind is not TerminalKind.FINAL_ANSWER:
        return PassJudgement(AnswerStatus.FAIL, f"no final answer ({trace.terminal.kind.value})")
    return judge_pass(query, trace.terminal.text, render_trace(trace), judge_backend)


def answer_text(trace: Trace) -> str:
    """A solution as the comparison judge sees it: final answer plus execution chain."""
    final = trace.final_answer if trace.final_answer is not None else f"({trace.terminal.kind.value})"
    return f"Final answer: {final}\nExecution chain:\n{render_trace(trace)}"


def _parse_index(obj: Any) -> int:
    if not isinstance(obj, dict):
        raise ValueError("judgement must be a JSON object")
    value = obj.get("better_answer_index")
    if isinstance(value, bool):
        raise ValueError("index must be 0 or 1")
    if isinstance(value, str) and value.strip() in ("0", "1"):
        return int(value.strip())
    if value in (0, 1):
        return int(value)
    raise ValueError("index must be 0 or 1")


def judge_compare(
    query: Query, answer_a: str, answer_b: str, judge_backend: Backend, swap: bool = False
) -> Comparison | None:
    """Index (0 for ``answer_a``) of the better answer; ``None`` when the judge output is unusable.

    With ``swap`` the answers are shown in reverse order and the index is
    mapped back, so the result always refers to the caller's order.
    """
    first, second = (answer_b, answer_a) if swap else (answer_a, answer_b)
    conv = render_prompt(TemplateId.WIN_JUDGE, {"query": query.text, "answer_0": first, "answer_1": second})
    index, raw = complete_json(judge_backend, conv, _parse_index, JUDGE_PARAMS)
    if index is None:
        log.warning("query %s: malformed comparison discarded", query.id)
        return None
    return Comparison(1 - index if swap else index, raw.split("{", 1)[0].strip(), swap)


@dataclass
class WinReport:
    comparisons: list[Comparison] = field(default_factory=list)
    discarded: int = 0
    audited: int = 0
    disagreements: int = 0

    @property
    def disagreement_rate(self) -> float | None:
        return self.disagreements / self.audited if self.audited else None

    def to_dict(self, candidate_index: int = 0) -> dict:
        return {
            "win_rate": win_rate(self.comparisons, candidate_index) if self.comparisons else None,
            "compared": len(self.comparisons),
            "discarded": self.discarded,
            "swap_audited": self.audited,
            "swap_disagreements": self.disagreements,
            "swap_disagreement_rate": self.disagreement_rate,
        }


def compare_batch(
    items: Sequence[tuple[Query, str, str]], judge_backend: Backend, swap_fraction: float = 0.5, seed: int = 0
) -> WinReport:
    """Judge each pair in natural order; a seeded ``swap_fraction`` subset is re-judged swapped."""
    if not 0.0 <= swap_fraction <= 1.0:
        raise ValueError("swap_fraction must lie in [0, 1]")
    rng = random.Random(f"swap:{seed}")
    audit = set(rng.sample(range(len(items)), round(swap_fraction * len(items))))
    report = WinReport()
    for i, (query, a, b) in enumerate(items):
        natural = judge_compare(query, a, b, judge_backend)
        if natural is None:
            report.discarded += 1
            continue
        report.comparisons.append(natural)
        if i in audit:
            swapped = judge_compare(query, a, b, judge_backend, swap=True)
            if swapped is not None:
                report.audited += 1
                report.disagreements += swapped.better_index != natural.better_index
    return report


def _parse_error_judgement(obj: Any) -> ErrorJudgement:
    if not isinstance(obj, dict):
        raise ValueError("judgement must be a JSON object")
    recognition = _member(Outcome, obj.get("error_recognition"))
    correction = _member(Outcome, obj.get("error_correction"))
    rationale = str(obj.get("content", ""))
    if correction is Outcome.PASS and recognition is Outcome.FAIL:
        log.warning("correction without recognition coerced to Fail/Fail")
        correction = Outcome.FAIL
    return ErrorJudgement(recognition, correction, rationale)


def judge_error_handling(initial_msgs: str, wrong_msgs: str, after_msgs: str, judge_backend: Backend) -> ErrorJudgement:
    for name, text in (("initial", initial_msgs), ("wrong", wrong_msgs), ("after", after_msgs)):
        if not text.strip():
            raise ValueError(f"{name} messages must be nonempty")
    conv = render_prompt(
        TemplateId.ERROR_JUDGE, {"initial_msgs": initial_msgs, "wrong_msgs": wrong_msgs, "after_msgs": after_msgs}
    )
    verdict, _ = complete_json(judge_backend, conv, _parse_error_judgement, JUDGE_PARAMS)
    if verdict is None:
        log.warning("malformed error-handling judgement; Fail/Fail")
        return ErrorJudgement(Outcome.FAIL, Outcome.FAIL, "malformed judge output")
    return verdict


# --------------------------------------------------------------------------- error-injection cases


class Scenario(str, enum.Enum):
    I1 = "I1"
    I2 = "I2"
    I3 = "I3"


@dataclass(frozen=True)
class RefineCase:
    scenario: Scenario
    query: Query
    tools: tuple[ToolSpec, ...]
    injected_prefix: tuple[Step, ...]
    wrong_action: ApiCall
    wrong_observation: Observation
    reference_action: ApiCall
    wrong_thought: str = ""

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "tools", tuple(self.tools))
        object.__setattr__(self, "injected_prefix", tuple(self.injected_prefix))
        if self.scenario is Scenario.I3 and not self.injected_prefix:
            raise ValueError("I3 cases carry a nonempty prefix")
        if self.wrong_action == self.reference_action:
            raise ValueError("wrong action must differ from the reference")

    @property
    def wrong_step(self) -> Step:
        return Step(self.wrong_thought or "Calling the API.", (self.wrong_action,), (self.wrong_observation,))

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "query": self.query.to_dict(),
            "tools": [t.to_dict() for t in self.tools],
            "injected_prefix": [s.to_dict() for s in self.injected_prefix],
            "wrong_thought": self.wrong_thought,
            "wrong_action": self.wrong_action.to_dict(),
            "wrong_observation": self.wrong_observation.to_dict(),
            "reference_action": self.reference_action.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefineCase":
        from .model import validate_tool_spec

        return cls(
            Scenario(d["scenario"]),
            Query.from_dict(d["query"]),
            tuple(validate_tool_spec(t) for t in d["tools"]),
            tuple(Step.from_dict(s) for s in d["injected_prefix"]),
            ApiCall.from_dict(d["wrong_action"]),
            Observation.from_dict(d["wrong_observation"]),
            ApiCall.from_dict(d["reference_action"]),
            d.get("wrong_thought", ""),
        )


def _wrong_value(value: Any, rng: random.Random) -> Any:
    """A value of a different JSON type."""
    if isinstance(value, str):
        return rng.randrange(10000, 100000)
    return str(value)


def api_level_mutations(call: ApiCall, spec: ToolSpec) -> list[str]:
    options = ["wrong_api_name", "extra_param"]
    supplied_required = [k for k in sorted(call.kwargs) if k in spec.required]
    if supplied_required:
        options.append("drop_required")
    if call.kwargs:
        options += ["rename_param", "type_mismatch"]
    return options


def mutate_api_level(call: ApiCall, spec: ToolSpec, rng: random.Random) -> ApiCall:
    """A deliberate calling error: wrong name, missing/renamed/unexpected parameter or wrong type."""
    kind = rng.choice(api_level_mutations(call, spec))
    kwargs = dict(call.kwargs)
    if kind == "wrong_api_name":
        return ApiCall(f"{call.tool_name}_v{rng.randrange(2, 10)}", kwargs)
    if kind == "extra_param":
        name = next(n for n in ("is_id", "id", "query_id") if spec.param(n) is None)
        kwargs[name] = rng.randrange(1, 100)
        return ApiCall(call.tool_name, kwargs)
    if kind == "drop_required":
        name = rng.choice([k for k in sorted(kwargs) if k in spec.required])
        del kwargs[name]
        return ApiCall(call.tool_name, kwargs)
    name = rng.choice(sorted(kwargs))
    if kind == "rename_param":
        kwargs[f"{name}_value" if spec.param(f"{name}_value") is None else f"{name}_x"] = kwargs.pop(name)
    else:
        kwargs[name] = _wrong_value(kwargs[name], rng)
    return ApiCall(call.tool_name, kwargs)


def perturb_step_action(call: ApiCall, tools: Sequence[ToolSpec], rng: random.Random) -> ApiCall:
    """A planning error: another tool from the set, or a meaningless parameter value."""
    others = [t for t in tools if t.name != call.tool_name]
    if others and (not call.kwargs or rng.random() < 0.5):
        target = rng.choice(others)
        kwargs = {k: v for k, v in call.kwargs.items() if target.param(k) is not None}
        return ApiCall(target.name, kwargs)
    if not call.kwargs:
        return call
    name = rng.choice(sorted(call.kwargs))
    value = call.kwargs[name]
    kwargs = dict(call.kwargs)
    if isinstance(value, bool):
        kwargs[name] = not value
    elif isinstance(value, int):
        kwargs[name] = rng.randrange(10000, 100000)
    elif isinstance(value, float):
        kwargs[name] = value + rng.randrange(1000, 10000)
    elif isinstance(value, str):
        kwargs[name] = f"{value} {rng.choice(['unknown', 'none', 'xyz'])}"
    else:
        kwargs[name] = type(value)()
    return ApiCall(call.tool_name, kwargs)


def _reference_ok(obs: Observation) -> bool:
    return obs.ok and obs.response not in ("", None)


def forge_single_tool_case(
    scenario: Scenario,
    query: Query,
    spec: ToolSpec,
    rng_seed: Any,
    backend: Backend,
    executor: Executor,
    timeout: float | None = 30.0,
) -> RefineCase:
    scenario = Scenario(scenario)
    wanted = Origin.LIVE if scenario is Scenario.I1 else Origin.SIMULATED
    if scenario is Scenario.I3:
        raise ValueError("I3 cases are forged from verified instances")
    if spec.origin is not wanted:
        raise UnsolvableCase(f"{scenario.value} needs a {wanted.value} tool, {spec.name} is {spec.origin.value}")
    try:
        examples = request_examples(spec, backend)
    except DslError as exc:
        raise UnsolvableCase(f"no usable reference call: {exc}") from None
    reference = None
    for call in examples:
        if _reference_ok(execute_call(executor, call, timeout)):
            reference = call
            break
    if reference is None:
        raise UnsolvableCase(f"no reference call to {spec.name} succeeds")
    rng = random.Random(f"{rng_seed}:{scenario.value}:{query.id}:{spec.name}")
    for _ in range(MAX_REDRAWS):
        wa = mutate_api_level(reference, spec, rng)
        if wa == reference:
            continue
        wo = execute_call(executor, wa, timeout)
        if wo.error:
            return RefineCase(scenario, query, (spec,), (), wa, wo, reference)
    raise UnsolvableCase(f"no API-level error produced for {spec.name}")


def forge_multi_tool_case(
    instance: VerifiedInstance, rng_seed: Any, executor: Executor, timeout: float | None = 30.0
) -> RefineCase:
    steps = instance.trace.steps
    if len(steps) < 2:
        raise UnsolvableCase("I3 needs at least two action steps")
    rng = random.Random(f"{rng_seed}:I3:{instance.query.id}")
    for _ in range(MAX_REDRAWS):
        j = rng.randrange(1, len(steps))
        ra = steps[j].calls[0]
        wa = perturb_step_action(ra, instance.tools, rng)
        if wa == ra:
            continue
        if not _reference_ok(execute_call(executor, ra, timeout)):
            continue
        wo = execute_call(executor, wa, timeout)
        return RefineCase(Scenario.I3, instance.query, instance.tools, steps[:j], wa, wo, ra, steps[j].thought)
    raise UnsolvableCase(f"no valid perturbation for {instance.query.id}")


def forge_refine_case(
    scenario: Scenario | str,
    source: Any,
    rng_seed: Any,
    backend: Backend | None,
    executor: Executor,
) -> RefineCase:
    """``source`` is a ``(Query, ToolSpec)`` pair for I1/I2 and a VerifiedInstance for I3."""
    scenario = Scenario(scenario)
    if scenario is Scenario.I3:
        return forge_multi_tool_case(source, rng_seed, executor)
    query, spec = source
    return forge_single_tool_case(scenario, query, spec, rng_seed, backend, executor)


@dataclass
class RefineBenchReport:
    quotas: dict[str, int]
    produced: dict[str, int] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"quotas": self.quotas, "produced": self.produced, "skipped": self.skipped}


def build_refine_bench(
    sources: dict[Scenario, Sequence[Any]],
    quotas: dict[Scenario, int],
    seed: int,
    backend: Backend | None,
    executor: Executor,
    max_rounds: int = 5,
) -> tuple[list[RefineCase], RefineBenchReport]:
    """Fill each scenario's quota, cycling through its sources with fresh seeds per round."""
    cases: list[RefineCase] = []
    report = RefineBenchReport({s.value: q for s, q in quotas.items()})
    for scenario in Scenario:
        quota = quotas.get(scenario, 0)
        pool = list(sources.get(scenario, ()))
        made = 0
        for rnd in range(max_rounds):
            for i, source in enumerate(pool):
                if made >= quota:
                    break
                try:
                    cases.append(forge_refine_case(scenario, source, f"{seed}:{rnd}:{i}", backend, executor))
                    made += 1
                except UnsolvableCase as exc:
                    report.skipped.append({"scenario": scenario.value, "round": rnd, "index": i, "reason": str(exc)})
        if made < quota:
            log.warning("%s: produced %d of %d cases", scenario.value, made, quota)
        report.produced[scenario.value] = made
    return cases, report


# --------------------------------------------------------------------------- running the benchmark


@dataclass(frozen=True)
class CaseResult:
    case: RefineCase
    trace: Trace
    judgement: ErrorJudgement

    def to_dict(self) -> dict:
        return {
            "scenario": self.case.scenario.value,
            "query": self.case.query.id,
            "judgement": self.judgement.to_dict(),
            "calls_after_error": self.trace.call_count - len(self.case.injected_prefix) - 1,
        }


def run_refine_case(
    case: RefineCase,
    agent_backend: Backend,
    judge_backend: Backend,
    executor: Executor,
    limits: EpisodeLimits = EpisodeLimits(),
) -> CaseResult:
    """Replay the injected error to the agent, let it continue, then judge recognition and correction."""
    seeded = list(case.injected_prefix) + [case.wrong_step]
    trace = run_episode(case.query, case.tools, agent_backend, executor, limits, initial_steps=seeded)
    after = [render_step(s) for s in trace.steps[len(seeded):]]
    tail = trace.terminal
    after.append(f"<thought>{tail.thought}</thought>\n[{tail.kind.value}] {tail.text}".strip())
    initial = f"Query: {case.query.text}\n" + "\n".join(render_step(s) for s in case.injected_prefix)
    judgement = judge_error_handling(initial, render_step(case.wrong_step), "\n".join(after), judge_backend)
    return CaseResult(case, trace, judgement)


def summarize_refine(results: Sequence[CaseResult]) -> dict:
    out: dict[str, Any] = {}
    for scenario in Scenario:
        group = [r for r in results if r.case.scenario is scenario]
        if group:
            err, ecr = err_ecr(r.judgement for r in group)
            out[scenario.value] = {"cases": len(group), "err": err, "ecr": ecr}
    if results:
        err, ecr = err_ecr(r.judgement for r in results)
        out["all"] = {"cases": len(results), "err": err, "ecr": ecr}
    return out


def summarize_pass(queries: Sequence[Query], traces: Sequence[Trace], judgements: Sequence[PassJudgement]) -> dict:
    """Pass rate and mean API calls overall and per query group."""
    rows = list(zip(queries, traces, judgements))
    out: dict[str, Any] = {}
    for key in sorted({q.group.value for q in queries}) + ["all"]:
        sel = [r for r in rows if key == "all" or r[0].group.value == key]
        if sel:
            out[key] = {
                "queries": len(sel),
                "pass_rate": pass_rate(j.status for _, _, j in sel),
                "avg_api_calls": avg_api_calls(t for _, t, _ in sel),
            }
    return out
