"""Supervised fine-tuning records from verified and reflection instances."""

from __future__ import annotations

import logging
import random
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .dsl import render_call, render_step
from .forge import episode_conversation
from .model import ReflectionInstance, Step, VerifiedInstance

log = logging.getLogger(__name__)


class RatioUnsatisfiable(UserWarning):
    pass


@dataclass(frozen=True)
class SftRecord:
    messages: tuple[dict, ...]
    target: str
    source: str
    step: int | None
    query_id: str

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "source": self.source,
            "step": self.step,
            "messages": list(self.messages),
            "target": self.target,
        }


def action_records(instance: VerifiedInstance) -> list[SftRecord]:
    """One record per action step; the context holds every earlier step and its observations."""
    steps = instance.trace.steps
    return [
        SftRecord(
            tuple(episode_conversation(instance.query, instance.tools, steps[:i]).to_list()),
            render_step(step, with_observations=False),
            "V",
            i,
            instance.query.id,
        )
        for i, step in enumerate(steps)
    ]


def reflection_target(inst: ReflectionInstance) -> str:
    return f"<thought>{inst.reflection}</thought>\n<execute>\n{render_call(inst.reference_action)}\n</execute>"


def reflection_record(inst: ReflectionInstance) -> SftRecord:
    wrong = Step(inst.wrong_thought, (inst.wrong_action,), (inst.wrong_observation,))
    conv = episode_conversation(inst.query, inst.tools, tuple(inst.prefix) + (wrong,))
    return SftRecord(tuple(conv.to_list()), reflection_target(inst), "R", None, inst.query.id)


def interleave(v: Sequence, r: Sequence, ratio: Fraction) -> list:
    """Blocks of ``p`` items of ``v`` followed by ``q`` of ``r`` for ``ratio = p/q``; leftovers go last."""
    p, q = ratio.numerator, ratio.denominator
    out: list = []
    i = j = 0
    while i < len(v) or j < len(r):
        out += v[i:i + p]
        i += p
        out += r[j:j + q]
        j += q
    return out


def export_sft(
    v: Sequence[VerifiedInstance],
    r: Sequence[ReflectionInstance],
    mix_ratio: Fraction | int = Fraction(10),
    seed: int = 0,
    interleaved: bool = True,
) -> list[SftRecord]:
    ratio = Fraction(mix_ratio)
    if ratio <= 0:
        raise ValueError("mix ratio must be positive")
    v_records = [rec for inst in v for rec in action_records(inst)]
    r_records = [reflection_record(inst) for inst in r]
    if bool(v_records) != bool(r_records):
        warnings.warn(
            RatioUnsatisfiable(f"ratio {ratio} needs both sources; emitting {len(v_records)} V and {len(r_records)} R"),
            stacklevel=2,
        )
    random.Random(f"{seed}:V").shuffle(v_records)
    random.Random(f"{seed}:R").shuffle(r_records)
    if not interleaved:
        return v_records + r_records
    return interleave(v_records, r_records, ratio)
