"""Scoring runs and mixing fine-tuning records."""

# %%
from fractions import Fraction

from toolforge.evalbench import Comparison, ErrorJudgement, err_ecr, pass_rate, win_rate
from toolforge.model import (
    AnswerStatus,
    ApiCall,
    ErrorKind,
    ErrorSub,
    Group,
    Observation,
    Outcome,
    Param,
    Query,
    ReflectionInstance,
    Step,
    Terminal,
    TerminalKind,
    ToolSpec,
    Trace,
    VerifiedInstance,
)
from toolforge.sft import export_sft

# Pass counts 1, Unsure a half, Fail nothing.
print(pass_rate([AnswerStatus.PASS, AnswerStatus.UNSURE, AnswerStatus.FAIL]))

# Index 0 is the candidate.
print(win_rate([Comparison(0), Comparison(0), Comparison(1)]))

# Recognition and correction rates; correction never exceeds recognition.
print(err_ecr([ErrorJudgement(Outcome.PASS, Outcome.PASS), ErrorJudgement(Outcome.PASS, Outcome.FAIL), ErrorJudgement(Outcome.FAIL, Outcome.FAIL)]))

# %% Export: one record per verified step, one per reflection, in 10:1 blocks.
lookup = ToolSpec("lookup", "Look a key up.", (Param("key", "integer"),), frozenset({"key"}))


def verified(qid: str, n_steps: int) -> VerifiedInstance:
    steps = tuple(Step(f"step {i}", (ApiCall("lookup", {"key": i}),), (Observation("", {"v": i}),)) for i in range(n_steps))
    query = Query(qid, f"query {qid}", Group.G1, ("lookup",))
    return VerifiedInstance(query, (lookup,), Trace(steps, Terminal(TerminalKind.FINAL_ANSWER, "ok")))


def reflection(qid: str) -> ReflectionInstance:
    inst = verified(qid, 2)
    return ReflectionInstance(
        inst.query,
        inst.tools,
        inst.trace.steps[:1],
        ApiCall("lookup", {"key": -1}),
        Observation("", "[]"),
        "That key does not exist; use the next one.",
        inst.trace.steps[1].calls[0],
        ErrorKind.planning(ErrorSub.WRONG_PARAMETER_CONTENT),
    )


records = export_sft([verified(f"v{i}", 2) for i in range(6)], [reflection(f"r{i}") for i in range(3)], Fraction(10), seed=1)
print("".join(r.source for r in records))
print(records[-1].target)
