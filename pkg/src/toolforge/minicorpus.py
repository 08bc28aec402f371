"""A small self-contained corpus with scripted backends for offline runs.

:func:`materialize` writes ten tools, twenty queries, a fixture upstream, a
mock-backend script and a pipeline config into a directory. Running every
stage over it exercises admission, rejection, exploration, benchmark
forging and the three evaluation metrics with no network access.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

from .dsl import render_call
from .model import ApiCall, canonical_json

W = "get_weather_forecast"
CARS = "cars_for_car_data"
LANG = "get_list_of_languages_for_businessmate"
ALL = "all_airplanes_for_airplanesdb"
ONE = "single_airplane_for_airplanesdb"
ORD = "airplanes_ordered_by_ascending_for_airplanesdb"
UORD = "get_user_orders_for_onboarding_project_v3"
ORDER = "get_order_for_onboarding_project_v3"
FLY = "search_flights_by_company"
EXAM = "GetFinalExamScores"


def _tool(name: str, description: str, params: dict[str, tuple[str, str]] = None, required=()) -> dict:
    params = params or {}
    return {
        "name": name,
        "description": description,
        "parameters": {k: {"type": t, "description": d} for k, (t, d) in params.items()},
        "required": list(required),
    }


TOOLS = [
    _tool(
        W,
        "Daily weather forecast for a city.",
        {"city": ("string", "City name"), "date": ("string", "Forecast day as YYYY-MM-DD")},
        ["city", "date"],
    ),
    _tool(
        CARS,
        "Retrieve and filter lists of cars",
        {
            "page": ("integer", ""),
            "limit": ("integer", ""),
            "make": ("string", ""),
            "year": ("string", ""),
            "model": ("string", ""),
            "type": ("string", ""),
        },
        ["page", "limit"],
    ),
    _tool(LANG, "Get supported languages with codes"),
    _tool(ALL, "Get all airplanes data"),
    _tool(ONE, "Get specific airplane details by ID", {"is_id": ("integer", "Airplane ID")}, ["is_id"]),
    _tool(ORD, "Get airplanes ordered by field", {"ordering": ("string", "Field to sort by")}, ["ordering"]),
    _tool(UORD, "Get user's order history", {"user_id": ("string", "")}, ["user_id"]),
    _tool(ORDER, "Get detailed information for a specific order", {"order_id": ("integer", "")}, ["order_id"]),
    _tool(
        FLY,
        "Flight data for an airline company on a given day",
        {"company": ("string", "Airline ICAO code"), "date": ("string", "Departure day in YYYY-MM-DD format")},
        ["company", "date"],
    ),
    _tool(EXAM, "Retrieves student's exam scores", {"student_id": ("string", "Student identifier")}, ["student_id"]),
]

UPSTREAM = {
    "seed": 0,
    "behaviors": {ORD: "flaky", FLY: "error:API doesn't exist", EXAM: "error:ACCESS_DENIED"},
}

# --------------------------------------------------------------------------- queries


def _q(qid: str, group: str, tools: list[str], text: str) -> dict:
    return {"id": qid, "text": text, "group": group, "tools": tools}


QUERIES = [
    _q("q01", "G1", [W], "What will the weather be like in London on 2024-12-25?"),
    _q(
        "q02",
        "G2",
        [LANG, ALL, ONE, ORD],
        "I'm organizing a language learning event and need a list of supported languages. "
        "I also want details of one airplane for an aviation history presentation.",
    ),
    _q("q03", "G2", [UORD, ORDER], "Show me the status of the most recent order for user u-1001."),
    _q("q04", "G1", [CARS], "List the first five cars made by Toyota in 2020."),
    _q("q05", "G1", [EXAM], "Retrieve the final exam scores for student 12345."),
    _q("q06", "G3", [LANG, W], "Which languages are supported for a Paris meetup, and what is the forecast there on 2024-12-25?"),
    _q("q07", "G3", [FLY, W], "Find AZU flights on 2022-06-15 and the weather forecast in Sao Paulo that day."),
    _q("q08", "G1", [ORD], "Sort the airplane catalogue by engine type and tell me the first entry."),
    _q(
        "q09",
        "G2",
        [LANG, ALL, ONE, ORD],
        "For a travel workshop, list the available languages and describe one airplane from the catalogue.",
    ),
    _q("q10", "G2", [UORD, ORDER], "How many orders has user u-2002 placed so far?"),
    _q("q11", "G1", [W], "Compare the weather on 2024-12-25 across every European capital."),
    _q("q12", "G2", [ALL, ONE], "Pick any airplane from the catalogue and show its full details."),
    _q("q13", "G1", [FLY], "Can you fetch the flight data for the company AZU on June 15th, 2022?"),
    _q("q14", "G1", [CARS], "Which films did the lead actor of the fastest car chase movie appear in?"),
    _q("q15", "G1", [LANG], "Transfer 2 BNB on the BSC testnet to my second wallet."),
    _q("q16", "G1", [ALL], "Count the airplanes in the catalogue."),
    _q("q17", "G1", [W], "Weather for the city I mentioned yesterday on the usual day."),
    _q("q18", "G1", [CARS], "cars?"),
    _q("q19", "G2", [UORD, ORDER], "Tell me something about my orders."),
    _q("q20", "G1", [EXAM], "Compare student 777's exam scores to the class average."),
]

# --------------------------------------------------------------------------- turn helpers


def _c(tool: str, **kwargs) -> ApiCall:
    return ApiCall(tool, kwargs)


def act(thought: str, *calls: ApiCall) -> str:
    body = "\n".join(render_call(c) for c in calls)
    return f"<thought>{thought}</thought>\n<execute>\n{body}\n</execute>"


def final(thought: str, answer: str) -> str:
    return f"<thought>{thought}</thought>\n<final_answer>{answer}</final_answer>"


def give_up(thought: str, reason: str) -> str:
    return f"<thought>{thought}</thought>\n<given_up>{reason}</given_up>"


def _js(**doc) -> str:
    return json.dumps(doc)


def _query_text(qid: str) -> str:
    return next(q["text"] for q in QUERIES if q["id"] == qid)


def _rule(responses, stage, template=None, pattern=None, scope="last", repeat=False) -> dict:
    rule = {"responses": list(responses), "stage": stage}
    if template:
        rule["template"] = template
    if pattern:
        rule["pattern"] = pattern
    if scope != "last":
        rule["scope"] = scope
    if repeat:
        rule["repeat"] = True
    return rule


def _agent_pattern(qid: str) -> str:
    # the query is the whole first user turn of the agent conversation
    return f"(?m)^{re.escape(_query_text(qid))}$"


def _judge_pattern(qid: str) -> str:
    return f"Query: {re.escape(_query_text(qid))}\n"


# --------------------------------------------------------------------------- probe


EXAMPLES = {
    W: [_c(W, city="London", date="2024-12-25"), _c(W, city="Tokyo", date="2025-01-01")],
    CARS: [_c(CARS, page=1, limit=5, make="Toyota"), _c(CARS, page=2, limit=10, year="2020")],
    LANG: [_c(LANG)],
    ALL: [_c(ALL)],
    ONE: [_c(ONE, is_id=1), _c(ONE, is_id=2)],
    ORD: [_c(ORD, ordering="speed"), _c(ORD, ordering="name")],  # odd and even call hashes under "flaky"
    UORD: [_c(UORD, user_id="u-1001")],
    ORDER: [_c(ORDER, order_id=1234), _c(ORDER, order_id=42)],
    FLY: [_c(FLY, company="AZU", date="2022-06-15")],
    EXAM: [_c(EXAM, student_id="12345")],
}


def example_reply(calls) -> str:
    lines = []
    for i, call in enumerate(calls, 1):
        lines += [f'print("Example {i}:")', render_call(call), ""]
    return "```python\n" + "\n".join(lines).rstrip() + "\n```"


CARS_REFINED = {
    "type": "function",
    "function": {
        "name": CARS,
        "description": "Retrieve and filter lists of cars. Supports pagination and filtering by make, year, model and body type.",
        "parameters": {
            "properties": {
                "page": {"type": "integer", "description": "Page number of the result list, starting at 1"},
                "limit": {"type": "integer", "description": "Number of cars per page"},
                "make": {"type": "string", "description": "Manufacturer, for example Toyota"},
                "year": {"type": "string", "description": "Model year, for example 2020"},
                "model": {"type": "string", "description": "Model name, for example Corolla"},
                "type": {"type": "string", "description": "Body type, for example SUV"},
            },
            "required": ["page", "limit"],
        },
    },
}

WEATHER_REFINED = {
    "type": "function",
    "function": {
        "name": W,
        "description": "Daily forecast for a city: temperature range and conditions.",
        "parameters": {
            "properties": {
                "city": {"type": "string", "description": "City name in English, for example London"},
                "date": {"type": "string", "description": "Forecast day as YYYY-MM-DD"},
            },
            "required": ["city", "date"],
        },
    },
}

ORDER_RENAMED = {
    "type": "function",
    "function": {
        "name": ORDER,
        "description": "Detailed information for one order",
        "parameters": {"properties": {"is_id": {"type": "integer", "description": "Order id"}}, "required": ["is_id"]},
    },
}

REFINE_REPLIES = {
    W: [_js(is_api_valid=True, refine_api=WEATHER_REFINED)],
    CARS: [_js(is_api_valid=True, refine_api=CARS_REFINED)],
    ORDER: [_js(is_api_valid=True, refine_api=ORDER_RENAMED)],
    EXAM: [_js(is_api_valid=False)],
    FLY: ["The documentation looks fine to me.", "Still nothing to add."],
}


def _probe_rules() -> list[dict]:
    rules = []
    for tool in TOOLS:
        name = tool["name"]
        pat = f"(?m)^API name: {re.escape(name)}$"
        rules.append(_rule([example_reply(EXAMPLES[name])], "probe", "ExampleGen", pat))
        rules.append(_rule(REFINE_REPLIES.get(name, [_js(is_api_valid=True)]), "probe", "RefineDoc", pat, "any"))
    return rules


# --------------------------------------------------------------------------- query verification


VERDICTS = {
    "q01": ["Clear city and date. " + _js(decision="Solvable", quality_score=9)],
    "q02": ["Both parts map onto the listed tools. " + _js(decision="Solvable", quality_score=9)],
    "q03": ["Orders tool plus detail tool cover it. " + _js(decision="Solvable", quality_score=8)],
    "q04": ["Filters map to parameters. " + _js(decision="Solvable", quality_score=8.7)],
    "q05": ["Direct lookup. " + _js(decision="Solvable", quality_score=8)],
    "q06": ["Two tools, both specified. " + _js(decision="Solvable", quality_score=9)],
    "q07": ["Date and code are complete. " + _js(decision="Solvable", quality_score=9)],
    "q08": ["Ordering field is a plain string. " + _js(decision="Solvable", quality_score=8)],
    "q09": ["Same shape as the event query. " + _js(decision="Solvable", quality_score=8)],
    "q10": ["Order history gives the count. " + _js(decision="Solvable", quality_score=8)],
    "q11": ["Many calls but feasible. " + _js(decision="Solvable", quality_score=8)],
    "q12": ["Catalogue then detail. " + _js(decision="Solvable", quality_score=10)],
    "q13": ["The date is not in the documented format. " + _js(decision="Solvable", quality_score=7)],
    "q14": ["No tool covers filmographies. " + _js(decision="Unsolvable", quality_score=3)],
    "q15": ["No wallet tool is available. " + _js(decision="Unsolvable", quality_score=2)],
    "q16": ["Looks solvable, score nine.", "I think it can be solved."],
    "q17": ["The city and day are unknown. " + _js(decision="Unsolvable", quality_score=10)],
    "q18": ["Too vague. " + _js(decision="Solvable", quality_score=5)],
    "q19": ["Underspecified. " + _js(decision="Solvable", quality_score=7.5)],
    "q20": [_js(decision="Solvable", quality_score=11), "Class average is not available. " + _js(decision="Solvable", quality_score=6)],
}


def _verify_rules() -> list[dict]:
    return [_rule(r, "verify-queries", "QueryVerify", _judge_pattern(q), "any") for q, r in VERDICTS.items()]


# --------------------------------------------------------------------------- forge

PLANE_LIST = "I have the full list of airplanes; ID 1 is the Boeing 737-800."

FORGE = {
    "q01": [
        act("I need the London forecast for Christmas day.", _c(W, city="London", date="2024-12-25")),
        final("The forecast came back.", "London on 2024-12-25: the forecast has been retrieved."),
    ],
    "q02": [
        act("First I get the supported languages.", _c(LANG)),
        act("Next I list all airplanes to pick an ID.", _c(ALL)),
        act(PLANE_LIST + " I fetch its details.", _c(ONE, is_id=1)),
        final("I have both pieces.", "Languages retrieved, and airplane 1 (Boeing 737-800) details are attached."),
    ],
    "q03": [
        act("I fetch the order history for u-1001.", _c(UORD, user_id="u-1001")),
        act("Order 1234 is the latest; I fetch its details.", _c(ORDER, order_id=1234)),
        final("The order details include its status.", "Order 1234 of user u-1001 has been retrieved with its status."),
    ],
    "q04": [
        act("One page of five Toyota cars from 2020.", _c(CARS, page=1, limit=5, make="Toyota", year="2020")),
        final("The filter returned results.", "Five Toyota cars from 2020 have been listed."),
    ],
    "q05": [
        act("I look up the scores of student 12345.", _c(EXAM, student_id="12345")),
        final("The scores were returned.", "Final exam scores for student 12345 retrieved."),
    ],
    "q06": [
        act("First the supported languages.", _c(LANG)),
        act("Now the Paris forecast.", _c(W, city="Paris", date="2024-12-25")),
        final("Both answers are in.", "Languages listed; Paris forecast for 2024-12-25 retrieved."),
    ],
    "q07": [
        act("First the AZU flights.", _c(FLY, company="AZU", date="2022-06-15")),
        act("Now the Sao Paulo forecast.", _c(W, city="Sao Paulo", date="2022-06-15")),
        final("Both results are in.", "AZU flights on 2022-06-15 and the Sao Paulo forecast retrieved."),
    ],
    "q08": [give_up("I cannot tell which field holds the engine type.", "The ordering field is undocumented.")],
    "q09": [
        act("First the languages.", _c(LANG)),
        act("I try airplane 12345.", _c(ONE, is_id=12345)),
        act("Nothing came back, so I list all airplanes.", _c(ALL)),
        act("I fetch the languages again.", _c(LANG)),
        act("I try airplane 12345 once more.", _c(ONE, is_id=12345)),
        act("Languages once more.", _c(LANG)),
        final("I only have the languages.", "Here is the list of languages."),
    ],
    "q10": [
        act("I fetch the order history.", _c(UORD, user_id="u-2002")),
        act("Let me fetch it again to be sure.", _c(UORD, user_id="u-2002")),
        final("I can count the orders.", "User u-2002 has placed their orders as listed."),
    ],
    "q11": [
        act(f"Forecast for {city}.", _c(W, city=city, date="2024-12-25"))
        for city in ("Paris", "Berlin", "Madrid", "Rome", "Vienna", "Lisbon", "Dublin", "Warsaw")
    ],
    "q12": [
        "I should list the airplanes first.",
        act("I list the airplanes.", _c(ALL)),
        act("I pick airplane 3.", _c(ONE, is_id=3)),
        final("Details retrieved.", "Airplane 3 details are shown above."),
    ],
}

FORGE_JUDGE = {
    q: [f"The trace answers the query. " + _js(content="ok", answer_status="Pass", all_steps_validity="yes")]
    for q in ("q01", "q02", "q03", "q04", "q05", "q06", "q07", "q12")
}
FORGE_JUDGE["q09"] = [
    "The airplane part was never answered. " + _js(content="repeated failed lookups", answer_status="Fail", all_steps_validity="no")
]


def _forge_rules() -> list[dict]:
    rules = [_rule(turns, "forge", "TrajectoryConstruct", _agent_pattern(q), "any") for q, turns in FORGE.items()]
    rules += [_rule(r, "forge", "AnswerVerify", _judge_pattern(q), "any") for q, r in FORGE_JUDGE.items()]
    return rules


# --------------------------------------------------------------------------- explore

EXPLORE = {
    "q02": [
        act("I guess airplane 12345.", _c(ONE, is_id=12345)),
        act("I list all airplanes.", _c(ALL)),
        act("I pass the ID as text.", _c(ONE, is_id="1")),
        act("I call the detail endpoint.", _c(ONE)),
    ],
    "q03": [
        act("The order tool takes an is_id.", _c(ORDER, is_id=1234)),
        act("I fetch order 1234.", _c(ORDER, order_id=1234)),
    ],
    "q06": [
        act("Forecast for Paris.", _c(W, city="Paris", date="December 25, 2024")),
        act("Forecast for Paris.", _c(W, city="Paris")),
    ],
    "q07": [
        act("Now the Sao Paulo forecast.", _c(W, city="Sao Paulo", date="2022-06-15")),
        "<thought>Maybe I should think more.</thought>",
        act("Let me check the flights again.", _c(FLY, company="AZU", date="2022-06-15")),
    ],
    "q12": [
        act("Airplane 7 looks interesting.", _c(ONE, is_id=7)),
        act("I list the airplanes sorted.", _c(ALL, sort="name")),
    ],
}


def _reflection(thought: str, call: ApiCall) -> str:
    return f"<thought>{thought}</thought>\n<execute>\n{render_call(call)}\n</execute>"


REFLECTIONS = {
    "q02": [
        _reflection(
            "The lookup for ID 12345 returned an empty list, so that ID does not exist. "
            "I should list all airplanes first and take a real ID from the result.",
            _c(ALL),
        ),
        _reflection(
            "The tool reported a type mismatch: is_id must be an integer, not a string. I resend it as 1.",
            _c(ONE, is_id=1),
        ),
        _reflection("The call failed because is_id is required. I supply ID 1 from the list.", _c(ONE, is_id=1)),
    ],
    "q03": [
        _reflection(
            "The request was rejected because is_id is not a parameter of this API. "
            "The documented parameter is order_id, so I retry with order_id=1234.",
            _c(ORDER, order_id=1234),
        )
    ],
    "q06": [
        _reflection(
            "The date was rejected for its format; the documentation asks for YYYY-MM-DD, so I use 2024-12-25.",
            _c(W, city="Paris", date="2024-12-25"),
        ),
        _reflection("The date parameter is required and was missing. I add 2024-12-25.", _c(W, city="Paris", date="2024-12-25")),
    ],
    "q07": [
        _reflection(
            "I already have the flights; repeating that search gives nothing new. "
            "The remaining part of the query is the Sao Paulo forecast.",
            _c(W, city="Sao Paulo", date="2022-06-15"),
        )
    ],
    "q12": [
        "<thought>The sort parameter is wrong, I will sort by name.</thought>\n<execute>\n"
        + render_call(_c(ORD, ordering="name"))
        + "\n</execute>",
        "<thought>Try again.</thought>\n<execute>\n" + render_call(_c(ALL)) + "\n</execute>",
    ],
}

BRANCH_JUDGE = {
    "q07": ["Repeating the flight search does not advance the forecast part. " + _js(content="no", task_relevant="no")],
    "q12": ["Airplane 7 is a valid choice. " + _js(content="yes", task_relevant="yes")],
}


def _explore_rules() -> list[dict]:
    rules = [_rule(turns, "explore", "TrajectoryConstruct", _agent_pattern(q), "any") for q, turns in EXPLORE.items()]
    rules += [_rule(r, "explore", "Reflection", _judge_pattern(q), "any") for q, r in REFLECTIONS.items()]
    rules += [_rule(r, "explore", "BranchJudge", _judge_pattern(q), "any") for q, r in BRANCH_JUDGE.items()]
    return rules


# --------------------------------------------------------------------------- refine bench and evaluation


def _bench_rules() -> list[dict]:
    return [
        _rule([example_reply(EXAMPLES[t["name"]])], "refine-bench", "ExampleGen", f"(?m)^API name: {re.escape(t['name'])}$", repeat=True)
        for t in TOOLS
    ]


PASS_JUDGE = {q: "Pass" for q in ("q01", "q02", "q03", "q04", "q06", "q07", "q12")}
PASS_JUDGE.update({"q05": "Unsure", "q09": "Fail", "q10": "Pass"})

ERROR_JUDGE = []
for i in range(25):
    if i % 5 == 4:
        rec, cor = "Fail", "Fail"
    elif i % 5 == 3:
        rec, cor = "Pass", "Fail"
    elif i == 7:
        rec, cor = "Fail", "Pass"  # coerced to Fail/Fail
    else:
        rec, cor = "Pass", "Pass"
    ERROR_JUDGE.append(_js(content=f"case {i}", error_recognition=rec, error_correction=cor))

RECOVER = final(
    "The last call returned an error, so I corrected the call and the retry succeeded.",
    "The corrected call returned the requested data.",
)


def _eval_rules() -> list[dict]:
    rules = [
        _rule(
            [f"Judged. " + _js(content="judged", answer_status=s)],
            "eval-pass",
            "PassJudge",
            f"Original query: {re.escape(_query_text(q))}\n",
            "any",
        )
        for q, s in PASS_JUDGE.items()
    ]
    rules.append(_rule([RECOVER], "eval-refine", "TrajectoryConstruct", repeat=True))
    rules.append(_rule(ERROR_JUDGE, "eval-refine", "ErrorJudge"))
    rules.append(_rule([give_up("I cannot solve this.", "No answer.")], "eval-win", "TrajectoryConstruct", repeat=True))
    gave_up = re.escape("Final answer: (GivenUp)")
    rules.append(_rule([_js(content="answer 1 gave up", better_answer_index="0")], "eval-win", "WinJudge", f"Answer_1:\n{gave_up}", repeat=True))
    rules.append(_rule([_js(content="answer 0 gave up", better_answer_index="1")], "eval-win", "WinJudge", f"Answer_0:\n{gave_up}", repeat=True))
    return rules


def script() -> dict:
    return {"rules": _probe_rules() + _verify_rules() + _forge_rules() + _explore_rules() + _bench_rules() + _eval_rules()}


CONFIG = """\
seed = 0
workers = 1

[paths]
workdir = "out"
apis = "apis.jsonl"
queries = "queries.jsonl"
upstream = "upstream.json"

[backends.agent]
kind = "mock"
script = "script.json"

[backends.judge]
kind = "mock"
script = "script.json"

[backends.baseline]
kind = "mock"
script = "script.json"

[simulator]
mode = "deterministic"
dispatch = "auto"

[query]
threshold = 8

[forge]
max_iterations = 8
per_call_timeout = 10.0

[explore]
k = 2
n = 2
temperature = 0.9

[refine]
quotas = { I1 = 10, I2 = 10, I3 = 5 }

[export]
mix_ratio = "10:1"
interleave = true

[eval]
swap_fraction = 0.5
"""


def _check_unambiguous() -> None:
    texts = [q["text"] for q in QUERIES]
    for a in texts:
        for b in texts:
            if a != b and a in b:
                raise AssertionError(f"query text {a!r} is contained in {b!r}")


def materialize(directory: str | Path) -> Path:
    """Write the corpus into ``directory`` and return the config path."""
    _check_unambiguous()
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "apis.jsonl").write_text("".join(canonical_json(t) + "\n" for t in TOOLS), encoding="utf-8")
    (root / "queries.jsonl").write_text("".join(canonical_json(q) + "\n" for q in QUERIES), encoding="utf-8")
    (root / "upstream.json").write_text(json.dumps(UPSTREAM, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (root / "script.json").write_text(json.dumps(script(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    path = root / "config.toml"
    path.write_text(CONFIG, encoding="utf-8")
    return path
