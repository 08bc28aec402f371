"""Stage orchestration: each stage reads upstream JSONL, writes its outputs atomically and records them in the manifest."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .apihub import (
    Deterministic,
    Executor,
    FixtureUpstream,
    HttpExecutor,
    LlmBacked,
    RegistryExecutor,
    ToolRegistry,
    apply_probe,
    probe_api,
    refine_doc,
)
from .dsl import DslError
from .evalbench import (
    Scenario,
    answer_text,
    build_refine_bench,
    compare_batch,
    judge_trace_pass,
    run_refine_case,
    summarize_pass,
    summarize_refine,
)
from .evalbench import RefineCase
from .explore import ExploreBackends, ExploreConfig, build_reflection_dataset
from .forge import EpisodeLimits, forge_batch, run_episode
from .llm import Backend, HttpBackend, LlmError, MockBackend
from .model import Group, Observation, Origin, Query, ReflectionInstance, ToolSpec, Trace, VerifiedInstance, canonical_json
from .querygate import assess_batch, filter_queries
from .sft import export_sft
from .store import (
    ConfigError,
    Manifest,
    MissingInput,
    PipelineConfig,
    StageRecord,
    jsonl_bytes,
    read_jsonl,
    sha256_file,
    atomic_write_bytes,
)

log = logging.getLogger(__name__)

REGISTRY = "registry.jsonl"
PROBES = "probe.jsonl"
VERDICTS = "verdicts.jsonl"
RETAINED = "retained.jsonl"
TOOLBENCH_V = "toolbench_v.jsonl"
EPISODES = "episodes.jsonl"
REJECTS = "rejects.jsonl"
TOOLBENCH_R = "toolbench_r.jsonl"
REFINE_BENCH = "refine_bench.jsonl"
SFT = "sft.jsonl"
EVAL_PASS = "eval_pass.json"
EVAL_WIN = "eval_win.json"
EVAL_REFINE = "eval_refine.json"

CORE_STAGES = ("probe", "verify-queries", "forge", "explore", "refine-bench", "export")
EVAL_STAGES = ("eval-pass", "eval-win", "eval-refine")
STAGES = CORE_STAGES + EVAL_STAGES
EXECUTING_STAGES = ("probe", "forge", "explore", "refine-bench", "eval-win", "eval-refine")


@dataclass
class StageOutput:
    files: dict[str, bytes]
    counts: dict[str, Any]
    report: dict = field(default_factory=dict)


class Context:
    def __init__(self, cfg: PipelineConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.manifest = Manifest(cfg.workdir)
        self.inputs: dict[str, str] = {}
        self.backend_names: dict[str, str] = {}
        self._backends: dict[str, Backend] = {}

    # inputs ----------------------------------------------------------------

    def work(self, name: str) -> Path:
        path = self.cfg.workdir / name
        self.inputs[name] = self.manifest.verify(path)
        return path

    def external(self, path: Path | None, label: str) -> Path:
        if path is None or not path.exists():
            raise MissingInput(f"{label}: {path}")
        self.inputs[f"{label}:{path.name}"] = sha256_file(path)
        return path

    def registry(self) -> ToolRegistry:
        return ToolRegistry(read_jsonl(self.work(REGISTRY), ToolSpec.from_dict))

    # backends --------------------------------------------------------------

    def declare_backend(self, role: str) -> None:
        """Register a role's identity (and script checksum) as a stage input."""
        bc = self.cfg.backends.get(role)
        if bc is None:
            return
        if bc.kind == "mock":
            if not bc.script:
                raise ConfigError(f"backends.{role}: mock backends need a script")
            self.external(Path(bc.script), f"script:{role}")
            self.backend_names[role] = f"mock:{Path(bc.script).name}"
        else:
            self.backend_names[role] = f"http:{bc.model}"

    def has_backend(self, role: str) -> bool:
        return role in self.cfg.backends

    def backend(self, role: str, fallback: str | None = None) -> Backend:
        if role in self._backends:
            return self._backends[role]
        bc = self.cfg.backends.get(role)
        if bc is None:
            if fallback is not None:
                return self.backend(fallback)
            raise ConfigError(f"no backend configured for role {role!r}")
        self.declare_backend(role)
        if bc.kind == "mock":
            backend: Backend = MockBackend.from_file(bc.script, stage=self.stage, name=f"mock:{role}")
        else:
            base = bc.base_url or os.environ.get("TOOLFORGE_API_BASE")
            if not base:
                raise ConfigError(f"backends.{role}: base_url or TOOLFORGE_API_BASE required")
            backend = HttpBackend(
                base,
                bc.model or os.environ.get("TOOLFORGE_MODEL", "gpt-4"),
                os.environ.get(bc.api_key_env),
                timeout=bc.timeout,
                max_retries=bc.max_retries,
            )
        self._backends[role] = backend
        return backend

    # execution -------------------------------------------------------------

    def upstream(self, registry: ToolRegistry) -> Executor | None:
        cfg = self.cfg
        if cfg.upstream is not None:
            doc = json.loads(self.external(cfg.upstream, "upstream").read_text(encoding="utf-8"))
            return FixtureUpstream(registry, doc.get("behaviors", {}), int(doc.get("seed", cfg.seed)))
        if cfg.upstream_url:
            return HttpExecutor(cfg.upstream_url, cfg.per_call_timeout)
        return None

    def executor(self, registry: ToolRegistry) -> RegistryExecutor:
        sim = LlmBacked(self.backend("simulator")) if self.cfg.sim_mode == "llm" else Deterministic(self.cfg.seed)
        return RegistryExecutor(registry, sim, self.upstream(registry), self.cfg.dispatch)

    @property
    def limits(self) -> EpisodeLimits:
        return EpisodeLimits(self.cfg.max_iterations, per_call_timeout=self.cfg.per_call_timeout)


def _no_upstream(call) -> Observation:
    return Observation("No live upstream configured", "")


# --------------------------------------------------------------------------- stages


def stage_probe(ctx: Context) -> StageOutput:
    specs = read_jsonl(ctx.external(ctx.cfg.apis, "apis"), ToolSpec.from_dict)
    agent = ctx.backend("agent")
    upstream = ctx.upstream(ToolRegistry(specs)) or _no_upstream
    out_specs, probes = [], []
    counts = {"apis": len(specs), "Valid": 0, "Invalid": 0, "Flaky": 0, "refined": 0, "refine_rejected": 0}
    for spec in specs:
        try:
            report = probe_api(spec, agent, upstream)
        except DslError as exc:
            counts["Invalid"] += 1
            probes.append({"tool": spec.name, "classification": "Invalid", "reason": f"unparseable examples: {exc}", "samples": []})
            out_specs.append(spec.with_origin(Origin.SIMULATED))
            continue
        counts[report.classification.value] += 1
        outcome = refine_doc(spec, report, agent)
        counts["refined"] += outcome.refined is not None
        counts["refine_rejected"] += outcome.rejection is not None
        out_specs.append(apply_probe(outcome.refined or spec, report))
        probes.append({**report.to_dict(), "refine": outcome.to_dict()})
    return StageOutput({REGISTRY: jsonl_bytes(out_specs), PROBES: jsonl_bytes(probes)}, counts)


def stage_verify_queries(ctx: Context) -> StageOutput:
    queries = read_jsonl(ctx.external(ctx.cfg.queries, "queries"), Query.from_dict)
    registry = ctx.registry()
    judge = ctx.backend("judge")
    verdicts = assess_batch(queries, lambda q: registry.subset(q.tools), judge, ctx.cfg.workers)
    retained, stats = filter_queries(queries, verdicts, ctx.cfg.quality_threshold)
    rows = [{"query": q.id, **v.to_dict()} for q, v in zip(queries, verdicts)]
    counts = {
        "assessed": len(queries),
        "solvable": stats.solvable,
        "retained": stats.retained,
        "malformed": sum(not v.well_formed for v in verdicts),
    }
    return StageOutput({VERDICTS: jsonl_bytes(rows), RETAINED: jsonl_bytes(retained)}, counts, stats.to_dict())


def stage_forge(ctx: Context) -> StageOutput:
    queries = read_jsonl(ctx.work(RETAINED), Query.from_dict)
    registry = ctx.registry()
    executor = ctx.executor(registry)
    agent, judge = ctx.backend("agent"), ctx.backend("judge")
    results = forge_batch(
        queries,
        lambda q: registry.subset(q.tools),
        agent,
        judge,
        lambda q: executor.restrict(q.tools),
        ctx.limits,
        ctx.cfg.workers,
    )
    admitted = [r.instance for r in results if r.instance is not None]
    rejects = [{"query": r.query.id, "reason": r.reason, "verdict": r.verdict.to_dict()} for r in results if r.instance is None]
    terminals: dict[str, int] = {}
    for r in results:
        terminals[r.trace.terminal.kind.value] = terminals.get(r.trace.terminal.kind.value, 0) + 1
    counts = {"episodes": len(results), "admitted": len(admitted), "rejected": len(rejects), "terminals": terminals}
    files = {TOOLBENCH_V: jsonl_bytes(admitted), EPISODES: jsonl_bytes(results), REJECTS: jsonl_bytes(rejects)}
    return StageOutput(files, counts)


def stage_explore(ctx: Context) -> StageOutput:
    instances = read_jsonl(ctx.work(TOOLBENCH_V), VerifiedInstance.from_dict)
    registry = ctx.registry()
    if not instances:
        log.warning("no verified instances; ToolBench-R is empty")
        return StageOutput({TOOLBENCH_R: b""}, {"instances": 0, "reflections": 0})
    executor = ctx.executor(registry)
    cfg = ctx.cfg
    backends = ExploreBackends(
        ctx.backend("agent"),
        ctx.backend("judge") if ctx.has_backend("judge") else None,
        ctx.backend("reflector", fallback="judge"),
    )
    config = ExploreConfig(cfg.explore_k, cfg.explore_n, cfg.explore_rng_seed, cfg.explore_temperature, cfg.per_call_timeout)
    dataset, report = build_reflection_dataset(
        instances, config, backends, lambda inst: executor.restrict(t.name for t in inst.tools), cfg.workers
    )
    counts = {"instances": len(instances), "reflections": len(dataset), "dropped": len(report.dropped)}
    return StageOutput({TOOLBENCH_R: jsonl_bytes(dataset)}, counts, report.to_dict())


def _query_for(spec: ToolSpec, queries: list[Query]) -> Query:
    for q in queries:
        if spec.name in q.tools:
            return q
    return Query(f"refine-{spec.name}", f"Use {spec.name}: {spec.description or spec.name}", Group.G1, (spec.name,))


def stage_refine_bench(ctx: Context) -> StageOutput:
    registry = ctx.registry()
    queries = read_jsonl(ctx.external(ctx.cfg.queries, "queries"), Query.from_dict)
    instances = read_jsonl(ctx.work(TOOLBENCH_V), VerifiedInstance.from_dict)
    sources = {
        Scenario.I1: [(_query_for(s, queries), s) for s in registry if s.origin is Origin.LIVE],
        Scenario.I2: [(_query_for(s, queries), s) for s in registry if s.origin is Origin.SIMULATED],
        Scenario.I3: [i for i in instances if len(i.trace.steps) >= 2 and len(i.tools) >= 2],
    }
    quotas = {Scenario(k): v for k, v in ctx.cfg.quotas.items()}
    cases, report = build_refine_bench(sources, quotas, ctx.cfg.seed, ctx.backend("agent"), ctx.executor(registry))
    counts = {"cases": len(cases), **{s.value: sum(c.scenario is s for c in cases) for s in Scenario}}
    return StageOutput({REFINE_BENCH: jsonl_bytes(cases)}, counts, report.to_dict())


def stage_export(ctx: Context) -> StageOutput:
    v = read_jsonl(ctx.work(TOOLBENCH_V), VerifiedInstance.from_dict)
    r = read_jsonl(ctx.work(TOOLBENCH_R), ReflectionInstance.from_dict)
    records = export_sft(v, r, ctx.cfg.mix_ratio, ctx.cfg.seed, ctx.cfg.interleave)
    counts = {
        "records": len(records),
        "V": sum(x.source == "V" for x in records),
        "R": sum(x.source == "R" for x in records),
        "mix_ratio": f"{ctx.cfg.mix_ratio.numerator}:{ctx.cfg.mix_ratio.denominator}",
    }
    return StageOutput({SFT: jsonl_bytes(records)}, counts)


def _json_bytes(doc: Any) -> bytes:
    return (canonical_json(doc) + "\n").encode("utf-8")


def _episodes(ctx: Context) -> list[tuple[Query, Trace]]:
    return [(Query.from_dict(d["query"]), Trace.from_dict(d["trace"])) for d in read_jsonl(ctx.work(EPISODES))]


def stage_eval_pass(ctx: Context) -> StageOutput:
    episodes = _episodes(ctx)
    judge = ctx.backend("judge")
    judgements = [judge_trace_pass(q, t, judge) for q, t in episodes]
    summary = summarize_pass([q for q, _ in episodes], [t for _, t in episodes], judgements) if episodes else {}
    doc = {
        "summary": summary,
        "judgements": [{"query": q.id, **j.to_dict()} for (q, _), j in zip(episodes, judgements)],
    }
    return StageOutput({EVAL_PASS: _json_bytes(doc)}, {"judged": len(judgements)}, summary)


def stage_eval_win(ctx: Context) -> StageOutput:
    episodes = _episodes(ctx)
    registry = ctx.registry()
    executor = ctx.executor(registry)
    baseline, judge = ctx.backend("baseline"), ctx.backend("judge")
    items = []
    for q, trace in episodes:
        other = run_episode(q, registry.subset(q.tools), baseline, executor.restrict(q.tools), ctx.limits)
        items.append((q, answer_text(trace), answer_text(other)))
    report = compare_batch(items, judge, ctx.cfg.swap_fraction, ctx.cfg.seed)
    doc = {
        "summary": report.to_dict(candidate_index=0),
        "comparisons": [c.to_dict() for c in report.comparisons],
    }
    return StageOutput({EVAL_WIN: _json_bytes(doc)}, {"pairs": len(items), "compared": len(report.comparisons)}, doc["summary"])


def stage_eval_refine(ctx: Context) -> StageOutput:
    cases = read_jsonl(ctx.work(REFINE_BENCH), RefineCase.from_dict)
    registry = ctx.registry()
    executor = ctx.executor(registry)
    agent, judge = ctx.backend("agent"), ctx.backend("judge")
    results = [
        run_refine_case(c, agent, judge, executor.restrict(t.name for t in c.tools), ctx.limits) for c in cases
    ]
    summary = summarize_refine(results)
    doc = {"summary": summary, "cases": [r.to_dict() for r in results]}
    return StageOutput({EVAL_REFINE: _json_bytes(doc)}, {"cases": len(results)}, summary)


STAGE_FUNCS: dict[str, Callable[[Context], StageOutput]] = {
    "probe": stage_probe,
    "verify-queries": stage_verify_queries,
    "forge": stage_forge,
    "explore": stage_explore,
    "refine-bench": stage_refine_bench,
    "export": stage_export,
    "eval-pass": stage_eval_pass,
    "eval-win": stage_eval_win,
    "eval-refine": stage_eval_refine,
}

STAGE_ROLES = {
    "probe": ("agent",),
    "verify-queries": ("judge",),
    "forge": ("agent", "judge", "simulator"),
    "explore": ("agent", "judge", "reflector", "simulator"),
    "refine-bench": ("agent", "simulator"),
    "export": (),
    "eval-pass": ("judge",),
    "eval-win": ("baseline", "judge", "simulator"),
    "eval-refine": ("agent", "judge", "simulator"),
}


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


def _declare_inputs(ctx: Context) -> None:
    """Collect every input checksum up front so an unchanged stage can be skipped without running."""
    cfg = ctx.cfg
    for role in STAGE_ROLES[ctx.stage]:
        if role != "simulator" or cfg.sim_mode == "llm":
            ctx.declare_backend(role)
    needs = {
        "probe": [],
        "verify-queries": [REGISTRY],
        "forge": [RETAINED, REGISTRY],
        "explore": [TOOLBENCH_V, REGISTRY],
        "refine-bench": [REGISTRY, TOOLBENCH_V],
        "export": [TOOLBENCH_V, TOOLBENCH_R],
        "eval-pass": [EPISODES],
        "eval-win": [EPISODES, REGISTRY],
        "eval-refine": [REFINE_BENCH, REGISTRY],
    }[ctx.stage]
    for name in needs:
        ctx.work(name)
    if ctx.stage == "probe":
        ctx.external(cfg.apis, "apis")
    if ctx.stage in ("verify-queries", "refine-bench"):
        ctx.external(cfg.queries, "queries")
    if cfg.upstream is not None and ctx.stage in EXECUTING_STAGES:
        ctx.external(cfg.upstream, "upstream")


def run_stage(cfg: PipelineConfig, stage: str, force: bool = False) -> dict:
    """Run one stage unless its recorded inputs, config and outputs are unchanged."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, stage)
    _declare_inputs(ctx)
    config_hash = cfg.digest()
    if not force and ctx.manifest.is_current(stage, dict(sorted(ctx.inputs.items())), config_hash):
        log.info("%s: inputs unchanged, skipping", stage)
        return {"stage": stage, "status": "unchanged", "counts": ctx.manifest.stages[stage]["counts"]}
    try:
        out = STAGE_FUNCS[stage](ctx)
    except (ConfigError, MissingInput):
        raise
    except (LlmError, ValueError, OSError) as exc:
        raise StageFailed(stage, exc) from exc
    digests = {}
    for name, data in sorted(out.files.items()):
        atomic_write_bytes(cfg.workdir / name, data)
        digests[name] = sha256_file(cfg.workdir / name)
    ctx.manifest.record(
        stage,
        StageRecord(
            dict(sorted(ctx.inputs.items())),
            digests,
            out.counts,
            cfg.seed,
            dict(sorted(ctx.backend_names.items())),
            config_hash,
            out.report,
        ),
    )
    return {"stage": stage, "status": "ran", "counts": out.counts}


def default_stages(cfg: PipelineConfig) -> list[str]:
    stages = list(CORE_STAGES) + ["eval-pass", "eval-refine"]
    if "baseline" in cfg.backends:
        stages.append("eval-win")
    return stages


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None, force: bool = False) -> list[dict]:
    return [run_stage(cfg, s, force) for s in (stages or default_stages(cfg))]
