"""Query feasibility and quality gate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .apihub import tools_doc_text
from .llm import Backend, complete_json
from .model import Query, Solvability, ToolSpec
from .prompts import TemplateId, render_prompt

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 8


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class QueryVerdict:
    decision: Solvability
    quality_score: int
    rationale: str = ""
    well_formed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decision", Solvability(self.decision))
        if isinstance(self.quality_score, bool) or not isinstance(self.quality_score, int):
            raise TypeError("quality_score must be an integer")
        if not 1 <= self.quality_score <= 10:
            raise ValueError("quality_score must lie in 1..10")

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.value,
            "quality_score": self.quality_score,
            "rationale": self.rationale,
            "well_formed": self.well_formed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryVerdict":
        return cls(Solvability(d["decision"]), int(d["quality_score"]), d.get("rationale", ""), d.get("well_formed", True))


FAIL_CLOSED = QueryVerdict(Solvability.UNSOLVABLE, 1, "malformed verdict", well_formed=False)


def parse_verdict(obj: Any) -> tuple[Solvability, int]:
    """Validate a judge object; non-integer scores are floored, out-of-range ones rejected."""
    if not isinstance(obj, dict):
        raise ValueError("verdict must be a JSON object")
    decision = obj.get("decision")
    if not isinstance(decision, str):
        raise ValueError("'decision' must be a string")
    matches = [s for s in Solvability if s.value.lower() == decision.strip().lower()]
    if not matches:
        raise ValueError(f"unknown decision {decision!r}")
    score = obj.get("quality_score")
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
        raise ValueError("'quality_score' must be a number")
    score = math.floor(score)
    if not 1 <= score <= 10:
        raise ValueError(f"quality_score {score} outside 1..10")
    return matches[0], int(score)


def _rationale(raw: str) -> str:
    head = raw.split("{", 1)[0].strip()
    return head or raw.strip()


def assess_query(query: Query, tools: Sequence[ToolSpec], backend: Backend) -> QueryVerdict:
    conv = render_prompt(TemplateId.QUERY_VERIFY, {"query": query.text, "tools": tools_doc_text(tools)})
    parsed, raw = complete_json(backend, conv, parse_verdict)
    if parsed is None:
        log.warning("query %s: malformed verdict twice, marking Unsolvable", query.id)
        return FAIL_CLOSED
    decision, score = parsed
    return QueryVerdict(decision, score, _rationale(raw))


def assess_batch(
    queries: Sequence[Query], tools_for: Any, backend: Backend, workers: int = 1
) -> list[QueryVerdict]:
    """Assess every query; ``tools_for(query)`` returns its tool specs. Output keeps input order."""
    task = lambda q: assess_query(q, tools_for(q), backend)  # noqa: E731
    if workers <= 1:
        return [task(q) for q in queries]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(task, queries))


@dataclass(frozen=True)
class GroupStats:
    total: int = 0
    solvable: int = 0
    retained: int = 0

    @property
    def retention_rate(self) -> float:
        return self.retained / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "solvable": self.solvable,
            "retained": self.retained,
            "retention_rate": self.retention_rate,
        }


@dataclass(frozen=True)
class FilterStats:
    total: int
    solvable: int
    retained: int
    per_group: dict[str, GroupStats] = field(default_factory=dict)

    def __post_init__(self):
        if not self.retained <= self.solvable <= self.total:
            raise ValueError("expected retained <= solvable <= total")

    @property
    def retention_rate(self) -> float:
        return self.retained / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "solvable": self.solvable,
            "retained": self.retained,
            "retention_rate": self.retention_rate,
            "per_group": {g: s.to_dict() for g, s in sorted(self.per_group.items())},
        }


def filter_queries(
    batch: Sequence[Query], verdicts: Sequence[QueryVerdict], threshold: int = DEFAULT_THRESHOLD
) -> tuple[list[Query], FilterStats]:
    """Keep Solvable queries scoring at least ``threshold``, in batch order."""
    if len(batch) != len(verdicts):
        raise LengthMismatch(f"{len(batch)} queries but {len(verdicts)} verdicts")
    retained: list[Query] = []
    counts: dict[str, list[int]] = {}
    for q, v in zip(batch, verdicts):
        solvable = v.decision is Solvability.SOLVABLE
        keep = solvable and v.quality_score >= threshold
        row = counts.setdefault(q.group.value, [0, 0, 0])
        row[0] += 1
        row[1] += solvable
        row[2] += keep
        if keep:
            retained.append(q)
    per_group = {g: GroupStats(*row) for g, row in counts.items()}
    stats = FilterStats(
        sum(r[0] for r in counts.values()),
        sum(r[1] for r in counts.values()),
        len(retained),
        per_group,
    )
    return retained, stats
