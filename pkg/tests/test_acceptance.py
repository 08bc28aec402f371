"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture."""

import json
import random
import shutil
import subprocess
import sys
import time
import warnings
from fractions import Fraction

import httpx
import pytest

from strategies import adversarial_refinements, bad_call_corpus, random_instance_set, random_trace, windowed_ratio_ok
from test_model import CARS_DOC
from test_pipeline import GOLDEN
from toolforge.apihub import (
    Deterministic,
    FixtureUpstream,
    RefineRejected,
    RegistryExecutor,
    ToolRegistry,
    check_refinement,
    simulate_call,
)
from toolforge.dsl import DslError, assemble_trace, parse_call_expr, parse_trace, render_call, render_trace, tokenize_blocks
from toolforge.evalbench import (
    Comparison,
    ErrorJudgement,
    RefineCase,
    avg_api_calls,
    err_ecr,
    judge_compare,
    judge_error_handling,
    judge_pass,
    pass_rate,
    win_rate,
)
from toolforge.explore import classify_error, judge_relevance, pick_exploration_points
from toolforge.forge import verify_trace
from toolforge.llm import MockBackend
from toolforge.minicorpus import materialize
from toolforge.model import (
    AnswerStatus,
    ApiCall,
    ErrorKind,
    Group,
    Observation,
    Outcome,
    Query,
    ReflectionInstance,
    Solvability,
    Step,
    StepValidity,
    Terminal,
    TerminalKind,
    Trace,
    VerifiedInstance,
    validate_tool_spec,
)
from toolforge.pipeline import run_pipeline, run_stage
from toolforge.querygate import assess_query
from toolforge.server import serve_registry
from toolforge.sft import RatioUnsatisfiable, export_sft
from toolforge.store import load_config, read_jsonl, sha256_file


class Criterion:
    """Collects failed checks, enforces a time budget and prints one status line."""

    def __init__(self, capsys, label: str, budget: float | None = None):
        self.capsys, self.label, self.budget = capsys, label, budget
        self.problems: list[str] = []

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.problems.append(what)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if self.budget is not None and elapsed >= self.budget:
            self.problems.append(f"took {elapsed:.2f}s, budget {self.budget}s")
        if exc_type is not None:
            self.problems.append(f"{exc_type.__name__}: {exc}")
        status = "PASS" if not self.problems else "FAIL"
        detail = "" if not self.problems else " :: " + "; ".join(self.problems[:3])
        with self.capsys.disabled():
            print(f"\nACCEPTANCE {status} {self.label} ({elapsed:.2f}s){detail}")
        if exc_type is None:
            assert not self.problems, self.problems
        return False


@pytest.fixture
def criterion(capsys):
    return lambda label, budget=None: Criterion(capsys, label, budget)


def _statuses(rng):
    return [rng.choice(list(AnswerStatus)) for _ in range(rng.randint(1, 40))]


def _comparisons(rng):
    return [Comparison(rng.randrange(2)) for _ in range(rng.randint(1, 40))]


def _judgements(rng):
    out = []
    for _ in range(rng.randint(1, 40)):
        rec = rng.choice(list(Outcome))
        cor = rng.choice(list(Outcome)) if rec is Outcome.PASS else Outcome.FAIL
        out.append(ErrorJudgement(rec, cor))
    return out


def test_c01_metric_exactness(criterion):
    rng = random.Random(2024)
    with criterion("C01 metric exactness", budget=5) as c:
        for _ in range(1000):
            statuses = _statuses(rng)
            tally = {s: 0 for s in AnswerStatus}
            for s in statuses:
                tally[s] += 1
            c.check(pass_rate(statuses) == (2 * tally[AnswerStatus.PASS] + tally[AnswerStatus.UNSURE]) / (2 * len(statuses)), "pass_rate")

            comps = _comparisons(rng)
            wins = 0
            for comp in comps:
                wins += comp.better_index == 0
            c.check(win_rate(comps) == wins / len(comps), "win_rate")
            c.check(win_rate(comps, 1) == (len(comps) - wins) / len(comps), "win_rate index 1")

            judgements = _judgements(rng)
            rec = cor = 0
            for j in judgements:
                if j.recognition is Outcome.PASS:
                    rec += 1
                    cor += j.correction is Outcome.PASS
            err, ecr = err_ecr(judgements)
            c.check((err, ecr) == (rec / len(judgements), cor / len(judgements)), "err_ecr")
            c.check(ecr <= err, "ecr above err")

            traces = [random_trace(rng) for _ in range(rng.randint(1, 8))]
            calls = 0
            for t in traces:
                for step in t.steps:
                    calls += len(step.calls)
            c.check(avg_api_calls(traces) == calls / len(traces), "avg_api_calls")
        c.check(pass_rate([AnswerStatus.PASS, AnswerStatus.UNSURE, AnswerStatus.FAIL]) == 0.5, "worked example")


def test_c02_dsl_round_trip(criterion):
    rng = random.Random(77)
    failures = 0
    with criterion("C02 DSL round-trip x10000", budget=30) as c:
        for _ in range(10_000):
            trace = random_trace(rng)
            text = render_trace(trace)
            try:
                assembled = assemble_trace(tokenize_blocks(text), [s.observations for s in trace.steps])
                failures += assembled != trace or parse_trace(text) != trace
            except DslError:
                failures += 1
        c.check(failures == 0, f"{failures} traces changed")


REFERENCE_CALLS = [
    (
        'print(ticket_info_query(destination="Beijing", travel_mode="Train"))',
        ApiCall("ticket_info_query", {"destination": "Beijing", "travel_mode": "Train"}),
    ),
    (
        'print(ticket_info_query(departure="Shanghai", destination="Beijing", travel_mode="Plane"))',
        ApiCall("ticket_info_query", {"departure": "Shanghai", "destination": "Beijing", "travel_mode": "Plane"}),
    ),
    (
        'print(ticket_info_query(departure="Guangzhou", destination="Shenzhen", travel_mode="Bus"))',
        ApiCall("ticket_info_query", {"departure": "Guangzhou", "destination": "Shenzhen", "travel_mode": "Bus"}),
    ),
    ("single_airplane_for_airplanesdb(is_id=1)", ApiCall("single_airplane_for_airplanesdb", {"is_id": 1})),
    ("get_list_of_languages_for_businessmate()", ApiCall("get_list_of_languages_for_businessmate", {})),
]


def test_c03_call_grammar(criterion):
    with criterion("C03 call-expression grammar", budget=10) as c:
        for text, expected in REFERENCE_CALLS:
            c.check(parse_call_expr(text) == [expected], text)
        accepted = []
        for body in bad_call_corpus(5000, seed=3):
            try:
                parse_call_expr(body)
                accepted.append(body)
            except DslError:
                pass
        c.check(not accepted, f"{len(accepted)} fuzz bodies accepted, e.g. {accepted[:1]}")


def _fill(ptype: str):
    return {"string": "x", "integer": 1, "number": 1.5, "boolean": True, "array": [], "object": {}}.get(ptype, "x")


def _probe_calls(spec):
    full = ApiCall(spec.name, {p.name: _fill(p.type) for p in spec.parameters})
    required = ApiCall(spec.name, {p.name: _fill(p.type) for p in spec.parameters if p.name in spec.required})
    return [full, required, ApiCall(spec.name, {"not_a_param": 1})]


def test_c04_envelope_bit_exactness(golden_run, criterion):
    cfg, _ = golden_run
    registry = ToolRegistry.load_jsonl(cfg.workdir / "registry.jsonl")
    cars = validate_tool_spec(CARS_DOC)
    probe = ApiCall("cars_for_car_data", {"page": 1, "limit": 2})
    with criterion("C04 envelope bit-exactness") as c:
        for spec in registry:
            for call in _probe_calls(spec):
                c.check(set(json.loads(simulate_call(spec, call, Deterministic(cfg.seed)).to_json())) == {"error", "response"}, spec.name)
        first = simulate_call(cars, probe, Deterministic(7)).to_json()
        c.check(all(simulate_call(cars, probe, Deterministic(7)).to_json() == first for _ in range(100)), "unstable in-process")

        code = (
            "from toolforge.apihub import simulate_call, Deterministic\n"
            "from toolforge.model import ApiCall, validate_tool_spec\n"
            "from test_model import CARS_DOC\n"
            "print(simulate_call(validate_tool_spec(CARS_DOC), ApiCall('cars_for_car_data', {'page': 1, 'limit': 2}), Deterministic(7)).to_json())"
        )
        runs = {
            subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True, cwd="tests").stdout
            for _ in range(2)
        }
        c.check(runs == {first + "\n"}, "unstable across processes")

        executor = RegistryExecutor(registry, Deterministic(cfg.seed), mode="sim")
        with serve_registry(registry, executor=executor) as srv, httpx.Client() as client:
            for spec in registry:
                for call in _probe_calls(spec):
                    bodies = {client.post(f"{srv.url}/api/{spec.name}", json=call.kwargs).content for _ in range(3)}
                    c.check(len(bodies) == 1, f"server unstable for {spec.name}")
                    c.check(set(json.loads(bodies.pop())) == {"error", "response"}, f"server keys for {spec.name}")
            bodies = {client.post(f"{srv.url}/api/cars_for_car_data", json=probe.kwargs).content for _ in range(100)}
            c.check(len(bodies) == 1, "server unstable across 100 calls")


def _digests(workdir):
    return {p.name: sha256_file(p) for p in sorted(workdir.iterdir())}


def test_c05_end_to_end_determinism(tmp_path, criterion):
    with criterion("C05 end-to-end determinism", budget=60) as c:
        runs = []
        for name in ("first", "second"):
            cfg = load_config(materialize(tmp_path / name), environ={})
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RefineRejected)
                results = run_pipeline(cfg)
            c.check({r["stage"]: r["counts"] for r in results} == GOLDEN, f"{name} counts differ from golden")
            runs.append(_digests(cfg.workdir))
        c.check(runs[0] == runs[1], "checksums differ between runs")

        manifest = json.loads((cfg.workdir / "manifest.json").read_text())
        counts = manifest["stages"]["verify-queries"]["counts"]
        c.check((counts["assessed"], counts["retained"]) == (20, 12), f"verify-queries {counts}")
        for e in read_jsonl(cfg.workdir / "episodes.jsonl"):
            v = e["verdict"]
            ok = (v["format_ok"], v["answer_status"], v["all_steps_valid"]) == (True, "Pass", "Yes") and bool(e["trace"]["steps"])
            c.check(e["admitted"] == ok, f"admission conjunction broken for {e['query']['id']}")
        for r in read_jsonl(cfg.workdir / "toolbench_r.jsonl", ReflectionInstance.from_dict):
            c.check(parse_call_expr(render_call(r.reference_action)) == [r.reference_action], f"ra parse {r.query.id}")


def _executor(cfg) -> RegistryExecutor:
    registry = ToolRegistry.load_jsonl(cfg.workdir / "registry.jsonl")
    doc = json.loads((cfg.root / "upstream.json").read_text())
    upstream = FixtureUpstream(registry, doc["behaviors"], int(doc.get("seed", cfg.seed)))
    return RegistryExecutor(registry, Deterministic(cfg.seed), upstream, cfg.dispatch)


def test_c06_explore_invariants(golden_run, criterion):
    cfg, _ = golden_run
    sources = {i.query.id: i for i in read_jsonl(cfg.workdir / "toolbench_v.jsonl", VerifiedInstance.from_dict)}
    reflections = read_jsonl(cfg.workdir / "toolbench_r.jsonl", ReflectionInstance.from_dict)
    rng = random.Random(6)
    with criterion("C06 EXPLORE invariants") as c:
        c.check(len(reflections) == GOLDEN["explore"]["reflections"], "reflection count")
        for r in reflections:
            t = len(r.prefix) - 1
            steps = sources[r.query.id].trace.steps
            c.check(r.wrong_action != r.reference_action, f"wa == ra for {r.query.id}")
            c.check(t + 1 < len(steps) and r.reference_action == steps[t + 1].calls[0], f"ra is not step t+1 for {r.query.id}")
            c.check(isinstance(r.error_kind, ErrorKind), f"error kind missing for {r.query.id}")
        for _ in range(2000):
            trace = random_trace(rng)
            for t in pick_exploration_points(trace, rng.randint(1, 4), rng.random()):
                c.check(t + 1 < len(trace.steps), "exploration point without successor")
            calls = [call for s in trace.steps for call in s.calls] or [ApiCall("f", {})]
            ra = rng.choice(calls)
            wa = rng.choice([ApiCall("other_tool", {}), ApiCall(ra.tool_name, {"zz": rng.random()})])
            wo = Observation(rng.choice(["", "Invalid API Request", "Missing required parameter", "boom", "API doesn't exist"]), rng.choice(["", "[]", {"a": 1}]))
            c.check(isinstance(classify_error(wa, wo, ra), ErrorKind), "classify_error not total")


def test_c07_refine_case_solvability(golden_run, criterion):
    cfg, _ = golden_run
    executor = _executor(cfg)
    cases = read_jsonl(cfg.workdir / "refine_bench.jsonl", RefineCase.from_dict)
    with criterion("C07 RefineCase solvability") as c:
        quotas = {s: sum(x.scenario.value == s for x in cases) for s in ("I1", "I2", "I3")}
        c.check(quotas == {"I1": 10, "I2": 10, "I3": 5}, f"quotas {quotas}")
        for case in cases:
            c.check(case.wrong_action != case.reference_action, f"wa == ra for {case.query.id}")
            obs = executor.restrict(t.name for t in case.tools)(case.reference_action)
            c.check(obs.ok and obs.response not in ("", None), f"reference not executable for {case.query.id}")


MALFORMED = ["", "{not json", "[1, 2]", "null", "Sure, looks good to me.", '{"unexpected": true}']


def _judge(reply):
    return MockBackend([reply, reply])


def test_c08_fail_closed_verdicts(golden_run, tmp_path, criterion):
    cfg, _ = golden_run
    q = Query("q", "Find airplane 1.", Group.G1, ("single_airplane_for_airplanesdb",))
    spec = validate_tool_spec(
        {"name": "single_airplane_for_airplanesdb", "description": "One airplane.", "parameters": {"type": "object", "properties": {"is_id": {"type": "integer", "description": "id"}}, "required": ["is_id"]}}
    )
    call = ApiCall(spec.name, {"is_id": 1})
    trace = Trace((Step("Look it up.", (call,), (Observation("", {"id": 1}),)),), Terminal(TerminalKind.FINAL_ANSWER, "Boeing.", "Done."))
    with criterion("C08 fail-closed verdicts") as c:
        for reply in MALFORMED:
            v = assess_query(q, [spec], _judge(reply))
            c.check((v.decision, v.quality_score) == (Solvability.UNSOLVABLE, 1), f"query gate {reply!r}")
            tv = verify_trace(q, trace, _judge(reply))
            c.check((tv.answer_status, tv.all_steps_valid) == (AnswerStatus.UNSURE, StepValidity.NO), f"trace verify {reply!r}")
            c.check(not judge_relevance(q.text, ApiCall(spec.name, {"is_id": 9}), Observation("", "[]"), call, _judge(reply)), f"relevance {reply!r}")
            c.check(judge_pass(q, "Boeing.", "chain", _judge(reply)).status in (AnswerStatus.UNSURE, AnswerStatus.FAIL), f"pass {reply!r}")
            c.check(judge_compare(q, "a", "b", _judge(reply)) is None, f"compare {reply!r}")
            j = judge_error_handling("q", "wrong", "after", _judge(reply))
            c.check((j.recognition, j.correction) == (Outcome.FAIL, Outcome.FAIL), f"error judge {reply!r}")

        root = tmp_path / "hostile"
        shutil.copytree(cfg.root, root)
        (root / "hostile.json").write_text(json.dumps({"rules": [{"responses": ["I cannot decide. {not json"], "repeat": True}]}))
        hostile = load_config(root / "config.toml", {"TOOLFORGE__BACKENDS__JUDGE__SCRIPT": "hostile.json"})
        out = {}
        for stage in ("eval-pass", "eval-win", "eval-refine", "explore", "forge", "verify-queries"):
            out[stage] = run_stage(hostile, stage, force=True)["counts"]
        work = hostile.workdir
        statuses = {j["status"] for j in json.loads((work / "eval_pass.json").read_text())["judgements"]}
        c.check(statuses <= {"Unsure", "Fail"}, f"eval-pass statuses {statuses}")
        win = json.loads((work / "eval_win.json").read_text())["summary"]
        c.check((win["compared"], win["discarded"]) == (0, 12), f"eval-win {win}")
        refine = json.loads((work / "eval_refine.json").read_text())
        c.check(all(x["judgement"]["recognition"] == x["judgement"]["correction"] == "Fail" for x in refine["cases"]), "eval-refine")
        c.check(refine["summary"]["all"]["err"] == refine["summary"]["all"]["ecr"] == 0.0, "eval-refine rates")
        c.check(out["explore"]["reflections"] == 0, f"explore {out['explore']}")
        c.check(out["forge"]["admitted"] == 0, f"forge {out['forge']}")
        for e in read_jsonl(work / "episodes.jsonl"):
            if e["verdict"]["format_ok"]:
                c.check((e["verdict"]["answer_status"], e["verdict"]["all_steps_valid"]) == ("Unsure", "No"), f"forge verdict {e['query']['id']}")
        verdicts = read_jsonl(work / "verdicts.jsonl")
        c.check(all((v["decision"], v["quality_score"]) == ("Unsolvable", 1) for v in verdicts), "verify-queries verdicts")
        c.check((out["verify-queries"]["retained"], out["verify-queries"]["malformed"]) == (0, 20), f"verify-queries {out['verify-queries']}")


def test_c09_sft_export_law(criterion):
    rng = random.Random(9)
    with criterion("C09 SFT export law") as c:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RatioUnsatisfiable)
            for i in range(200):
                v, r = random_instance_set(rng)
                recs = export_sft(v, r, Fraction(10), seed=i)
                c.check(len(recs) == sum(len(x.trace.steps) for x in v) + len(r), f"count law, set {i}")
                c.check(windowed_ratio_ok([x.source for x in recs], 10, 1), f"10:1 windows, set {i}")


def test_c10_refinement_immutability(criterion):
    original = validate_tool_spec(CARS_DOC)
    with criterion("C10 refinement immutability x500") as c:
        accepted = 0
        for doc in adversarial_refinements(CARS_DOC, 500, seed=10):
            try:
                check_refinement(original, doc)
                accepted += 1
            except ValueError:
                pass
        c.check(accepted == 0, f"{accepted} of 500 adversarial refinements accepted")
