"""Hypothesis strategies for domain values and fuzz corpora shared by the test modules."""

from __future__ import annotations

import json
import random
import string

from hypothesis import strategies as st

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

RESERVED = {"print"}

identifiers = st.from_regex(r"[a-z_][a-z0-9_]{0,11}", fullmatch=True).filter(lambda s: s not in RESERVED)

# free text that may appear inside a tag body; tag and fence characters are excluded
tag_text = st.text(
    st.characters(blacklist_categories=("Cs",), blacklist_characters="<>`"), max_size=40
).map(str.strip)

finite_floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(-(10**12), 10**12),
    finite_floats,
    st.text(st.characters(blacklist_categories=("Cs",)), max_size=20),
)
_homogeneous_lists = st.one_of(
    st.lists(st.integers(-1000, 1000), max_size=4),
    st.lists(st.text(max_size=8), max_size=4),
    st.lists(st.booleans(), max_size=4),
)
literals = st.one_of(
    scalars,
    _homogeneous_lists,
    st.dictionaries(st.text(max_size=6), scalars, max_size=3),
)

api_calls = st.builds(ApiCall, identifiers, st.dictionaries(identifiers, literals, max_size=3))

json_values = st.recursive(
    st.one_of(st.none(), st.booleans(), st.integers(-1000, 1000), st.text(max_size=12)),
    lambda inner: st.one_of(st.lists(inner, max_size=3), st.dictionaries(st.text(max_size=6), inner, max_size=3)),
    max_leaves=8,
)
observations = st.builds(Observation, st.text(max_size=20), json_values)


@st.composite
def steps(draw) -> Step:
    calls = draw(st.lists(api_calls, min_size=1, max_size=2))
    obs = draw(st.lists(observations, min_size=len(calls), max_size=len(calls)))
    return Step(draw(tag_text), tuple(calls), tuple(obs))


@st.composite
def terminals(draw) -> Terminal:
    kind = draw(st.sampled_from(list(TerminalKind)))
    thought = draw(tag_text)
    if kind is TerminalKind.TRUNCATED:
        return Terminal(kind, "", thought)
    return Terminal(kind, draw(tag_text), thought)


traces = st.builds(Trace, st.lists(steps(), max_size=5).map(tuple), terminals())

statuses = st.lists(st.sampled_from(list(AnswerStatus)), min_size=1, max_size=40)
outcome_pairs = st.lists(
    st.sampled_from([(Outcome.PASS, Outcome.PASS), (Outcome.PASS, Outcome.FAIL), (Outcome.FAIL, Outcome.FAIL)]),
    min_size=1,
    max_size=40,
)


def bad_call_corpus(n: int, seed: int = 0) -> list[str]:
    """Execute-block bodies using positional arguments, nested calls or arithmetic."""
    rng = random.Random(seed)
    names = ["f", "get_weather", "single_airplane_for_airplanesdb", "search", "tool_x"]
    kws = ["city", "is_id", "date", "q", "limit"]

    def lit() -> str:
        return rng.choice(['"London"', "1", "2.5", "True", "None", "'x'", "[1, 2]", '{"a": 1}'])

    def good_kw() -> str:
        return f"{rng.choice(kws)}={lit()}"

    def positional() -> str:
        args = [good_kw() for _ in range(rng.randrange(0, 3))]
        args.insert(rng.randrange(len(args) + 1), lit())
        return f"{rng.choice(names)}({', '.join(args)})"

    def nested() -> str:
        inner = f"{rng.choice(names)}({good_kw()})"
        return f"{rng.choice(names)}({rng.choice(kws)}={inner})"

    def arithmetic() -> str:
        op = rng.choice(["+", "*", "/", "%", "**", "-"])
        a, b = rng.choice(["1", "2", "x", "3.5", '"a"']), rng.choice(["1", "2", "y", "4"])
        if op == "-":
            a = rng.choice(["x", "1", "2"])
        return f"{rng.choice(names)}({rng.choice(kws)}={a}{op}{b})"

    makers = [positional, nested, arithmetic]
    out = []
    for i in range(n):
        body = makers[i % 3]()
        if rng.random() < 0.5:
            body = f"print({body})"
        out.append(body)
    return out


def random_ascii(n: int, rng: random.Random) -> str:
    return "".join(rng.choice(string.printable) for _ in range(n))


_TYPES = ["string", "integer", "number", "boolean", "array", "object"]


def adversarial_refinements(doc: dict, n: int, seed: int = 0) -> list[dict]:
    """Refined documents that each break the name, parameter set, required set or a type.

    ``doc`` is a function-style document. Every output also rewrites all
    descriptions, which alone would be a legal refinement.
    """
    rng = random.Random(seed)
    names = set(doc["function"]["parameters"]["properties"])

    def pick(props):
        # only original parameters, so two mutations never cancel out
        return rng.choice(sorted(names & set(props)))

    def rename_api(fn):
        fn["name"] = fn["name"] + rng.choice(["_v2", "x", "_api"])

    def rename_param(fn):
        props = fn["parameters"]["properties"]
        old = pick(props)
        new = f"{old}_{rng.randrange(100)}"
        props[new] = props.pop(old)
        req = fn["parameters"]["required"]
        fn["parameters"]["required"] = [new if r == old else r for r in req]

    def add_param(fn):
        fn["parameters"]["properties"][f"extra_{rng.randrange(1000)}"] = {"type": rng.choice(_TYPES), "description": "x"}

    def drop_param(fn):
        props = fn["parameters"]["properties"]
        old = pick(props)
        del props[old]
        fn["parameters"]["required"] = [r for r in fn["parameters"]["required"] if r != old]

    def add_required(fn):
        req = fn["parameters"]["required"]
        declared = doc["function"]["parameters"]
        optional = sorted(set(fn["parameters"]["properties"]) & (set(declared["properties"]) - set(declared["required"])) - set(req))
        if optional:
            req.append(rng.choice(optional))
        else:
            req.pop()

    def drop_required(fn):
        req = fn["parameters"]["required"]
        original = [r for r in doc["function"]["parameters"]["required"] if r in req]
        if original:
            req.remove(rng.choice(original))
        else:
            req.append(sorted(fn["parameters"]["properties"])[0])

    def retype(fn):
        props = fn["parameters"]["properties"]
        p = props[pick(props)]
        p["type"] = rng.choice([t for t in _TYPES if t != p["type"]])

    mutators = [rename_api, rename_param, add_param, drop_param, add_required, drop_required, retype]
    out = []
    for i in range(n):
        fn = json.loads(json.dumps(doc["function"]))
        fn["description"] = f"Rewritten summary {i}."
        for p in fn["parameters"]["properties"].values():
            p["description"] = f"Clarified meaning {rng.randrange(10**6)}."
        chosen = [mutators[i % len(mutators)]] + rng.sample(mutators, rng.randrange(0, 3))
        for m in dict.fromkeys(chosen):
            m(fn)
        out.append({"type": "function", "function": fn})
    return out


def make_verified(qid: str, n_steps: int) -> VerifiedInstance:
    tool = ToolSpec("lookup", "Look a key up.", (Param("key", "integer"),), frozenset({"key"}))
    steps = tuple(Step(f"step {i}", (ApiCall("lookup", {"key": i}),), (Observation("", {"v": i}),)) for i in range(n_steps))
    return VerifiedInstance(Query(qid, f"query {qid}", Group.G1, ("lookup",)), (tool,), Trace(steps, Terminal(TerminalKind.FINAL_ANSWER, "ok")))


def make_reflection(qid: str, t: int = 0) -> ReflectionInstance:
    inst = make_verified(qid, t + 2)
    return ReflectionInstance(
        inst.query,
        inst.tools,
        inst.trace.steps[: t + 1],
        ApiCall("lookup", {"key": -1}),
        Observation("", "[]"),
        "That key does not exist; use the next one.",
        inst.trace.steps[t + 1].calls[0],
        ErrorKind.planning(ErrorSub.WRONG_PARAMETER_CONTENT),
    )


def random_instance_set(rng: random.Random) -> tuple[list[VerifiedInstance], list[ReflectionInstance]]:
    v = [make_verified(f"v{i}", rng.randint(1, 6)) for i in range(rng.randint(0, 12))]
    r = [make_reflection(f"r{i}", rng.randint(0, 3)) for i in range(rng.randint(0, 10))]
    return v, r


def windowed_ratio_ok(sources: list[str], p: int, q: int) -> bool:
    """True iff the sequence is blocks of ``p`` V then ``q`` R until one side runs out."""
    n_v, n_r = sources.count("V"), sources.count("R")
    i = used_v = used_r = 0
    while used_v < n_v or used_r < n_r:
        take_v = min(p, n_v - used_v)
        take_r = min(q, n_r - used_r)
        window = sources[i:i + take_v + take_r]
        if window != ["V"] * take_v + ["R"] * take_r:
            return False
        i += take_v + take_r
        used_v += take_v
        used_r += take_r
    return i == len(sources)


_WORDS = ["London", "2024-12-25", "Boeing 737-800", "naïve", "東京", "emoji 🚀", "quote \" back \\ slash", "tab\there", "line\nbreak", "</execute>", "```", "<thought>", "{}", "", " "]


def _random_text(rng: random.Random, tag_safe: bool) -> str:
    words = [rng.choice(_WORDS) for _ in range(rng.randrange(0, 5))] + [random_ascii(rng.randrange(0, 8), rng)]
    text = " ".join(words)
    if tag_safe:
        text = "".join(c for c in text if c not in "<>`")
    return text.strip() if tag_safe else text


def _random_scalar(rng: random.Random):
    kind = rng.randrange(6)
    if kind == 0:
        return None
    if kind == 1:
        return rng.random() < 0.5
    if kind == 2:
        return rng.randint(-(10**12), 10**12)
    if kind == 3:
        return rng.choice([0.0, -0.5, 1e-300, 3.141592653589793, 1e21, rng.uniform(-1e6, 1e6)])
    return _random_text(rng, tag_safe=False)


def _random_literal(rng: random.Random):
    kind = rng.randrange(8)
    if kind == 6:
        make = rng.choice([lambda: rng.randint(-9, 9), lambda: _random_text(rng, False), lambda: rng.random() < 0.5])
        return [make() for _ in range(rng.randrange(0, 4))]
    if kind == 7:
        return {_random_text(rng, False): _random_scalar(rng) for _ in range(rng.randrange(0, 3))}
    return _random_scalar(rng)


def _random_json(rng: random.Random, depth: int = 0):
    kind = rng.randrange(4 if depth < 2 else 2)
    if kind == 0:
        return _random_scalar(rng)
    if kind == 1:
        return _random_text(rng, False)
    if kind == 2:
        return [_random_json(rng, depth + 1) for _ in range(rng.randrange(0, 3))]
    return {_random_text(rng, False): _random_json(rng, depth + 1) for _ in range(rng.randrange(0, 3))}


def random_trace(rng: random.Random) -> Trace:
    """A seeded trace with hostile strings, unicode, extreme numbers and every terminal kind."""
    steps = []
    for _ in range(rng.randrange(0, 6)):
        calls = tuple(
            ApiCall(
                rng.choice(["f", "get_weather_forecast", "single_airplane_for_airplanesdb", "_x9"]),
                {f"k{j}_{rng.randrange(99)}": _random_literal(rng) for j in range(rng.randrange(0, 4))},
            )
            for _ in range(rng.randint(1, 2))
        )
        obs = tuple(Observation(_random_text(rng, False), _random_json(rng)) for _ in calls)
        steps.append(Step(_random_text(rng, True), calls, obs))
    kind = rng.choice(list(TerminalKind))
    text = "" if kind is TerminalKind.TRUNCATED else _random_text(rng, True)
    return Trace(tuple(steps), Terminal(kind, text, _random_text(rng, True)))
