"""Configuration, canonical JSONL persistence, atomic writes and the run manifest."""

from __future__ import annotations

import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import canonical_json

ENV_PREFIX = "TOOLFORGE__"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


class ChecksumMismatch(RuntimeError):
    pass


# --------------------------------------------------------------------------- files


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jsonl_bytes(records: Iterable[Any]) -> bytes:
    return "".join(canonical_json(r.to_dict() if hasattr(r, "to_dict") else r) + "\n" for r in records).encode("utf-8")


def write_jsonl(path: str | Path, records: Iterable[Any]) -> int:
    records = list(records)
    atomic_write_bytes(path, jsonl_bytes(records))
    return len(records)


def read_jsonl(path: str | Path, parse: Callable[[dict], Any] = lambda d: d) -> list[Any]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(str(path))
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(parse(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def write_json(path: str | Path, doc: Any) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8"))


# --------------------------------------------------------------------------- config


def parse_ratio(value: Any) -> Fraction:
    """``"10:1"``, ``"10/1"``, ``10`` or ``2.5`` as a positive rational."""
    try:
        if isinstance(value, str) and ":" in value:
            a, b = value.split(":", 1)
            ratio = Fraction(int(a), int(b))
        else:
            ratio = Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot read mix ratio {value!r}") from None
    if ratio <= 0:
        raise ConfigError("mix ratio must be positive")
    return ratio


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    script: str | None = None
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "TOOLFORGE_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ConfigError(f"backend kind must be mock or http, not {self.kind!r}")


@dataclass(frozen=True)
class PipelineConfig:
    root: Path
    workdir: Path
    apis: Path
    queries: Path
    upstream: Path | None = None
    upstream_url: str | None = None
    seed: int = 0
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    sim_mode: str = "deterministic"
    dispatch: str = "auto"
    quality_threshold: int = 8
    max_iterations: int = 12
    per_call_timeout: float = 30.0
    explore_k: int = 2
    explore_n: int = 4
    explore_seed: int | None = None
    explore_temperature: float = 0.9
    quotas: dict[str, int] = field(default_factory=lambda: {"I1": 10, "I2": 10, "I3": 5})
    mix_ratio: Fraction = Fraction(10)
    interleave: bool = True
    swap_fraction: float = 0.5
    workers: int = 1
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.mix_ratio <= 0:
            raise ConfigError("mix ratio must be positive")
        if self.sim_mode not in ("deterministic", "llm"):
            raise ConfigError("simulator.mode must be deterministic or llm")
        if self.dispatch not in ("auto", "sim", "live"):
            raise ConfigError("simulator.dispatch must be auto, sim or live")
        if not 1 <= self.quality_threshold <= 10:
            raise ConfigError("query.threshold must lie in 1..10")
        if not 0 <= self.swap_fraction <= 1:
            raise ConfigError("eval.swap_fraction must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @property
    def explore_rng_seed(self) -> int:
        return self.seed if self.explore_seed is None else self.explore_seed

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    def section_digest(self, *keys: str) -> str:
        return hashlib.sha256(canonical_json({k: self.raw.get(k) for k in keys}).encode()).hexdigest()


def _coerce_env(value: str) -> Any:
    try:
        return tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        return value


def apply_env_overrides(doc: dict, environ: Mapping[str, str]) -> dict:
    """``TOOLFORGE__SECTION__KEY=value`` sets ``doc[section][key]``; values parse as TOML when possible."""
    doc = json.loads(json.dumps(doc))
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name} addresses a non-table value")
        node[path[-1]] = _coerce_env(environ[name])
    return doc


def load_config(path: str | Path, environ: Mapping[str, str] | None = None, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    doc = apply_env_overrides(doc, os.environ if environ is None else environ)
    if seed is not None:
        doc["seed"] = seed
    return config_from_dict(doc, path.parent)


def config_from_dict(doc: dict, root: Path) -> PipelineConfig:
    root = Path(root).resolve()

    def resolve(p: str | None) -> Path | None:
        return None if p is None else (root / p).resolve()

    paths = doc.get("paths", {})
    try:
        backends = {}
        for role, spec in doc.get("backends", {}).items():
            spec = dict(spec)
            if spec.get("script"):
                spec["script"] = str(resolve(spec["script"]))
            backends[role] = BackendConfig(**spec)
        sim = doc.get("simulator", {})
        forge = doc.get("forge", {})
        explore = doc.get("explore", {})
        refine = doc.get("refine", {})
        export = doc.get("export", {})
        return PipelineConfig(
            root=root,
            workdir=resolve(paths.get("workdir", "out")),
            apis=resolve(paths.get("apis", "apis.jsonl")),
            queries=resolve(paths.get("queries", "queries.jsonl")),
            upstream=resolve(paths.get("upstream")),
            upstream_url=paths.get("upstream_url"),
            seed=int(doc.get("seed", 0)),
            backends=backends,
            sim_mode=sim.get("mode", "deterministic"),
            dispatch=sim.get("dispatch", "auto"),
            quality_threshold=int(doc.get("query", {}).get("threshold", 8)),
            max_iterations=int(forge.get("max_iterations", 12)),
            per_call_timeout=float(forge.get("per_call_timeout", 30.0)),
            explore_k=int(explore.get("k", 2)),
            explore_n=int(explore.get("n", 4)),
            explore_seed=explore.get("seed"),
            explore_temperature=float(explore.get("temperature", 0.9)),
            quotas={k: int(v) for k, v in refine.get("quotas", {"I1": 10, "I2": 10, "I3": 5}).items()},
            mix_ratio=parse_ratio(export.get("mix_ratio", "10:1")),
            interleave=bool(export.get("interleave", True)),
            swap_fraction=float(doc.get("eval", {}).get("swap_fraction", 0.5)),
            workers=int(doc.get("workers", 1)),
            raw=doc,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------- manifest


@dataclass
class StageRecord:
    inputs: dict[str, str]
    outputs: dict[str, str]
    counts: dict[str, Any]
    seed: int
    backends: dict[str, str]
    config: str
    report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class Manifest:
    """Per-stage checksums, counts and provenance for one work directory."""

    def __init__(self, workdir: Path):
        self.workdir = Path(workdir)
        self.path = self.workdir / MANIFEST
        self.stages: dict[str, dict] = {}
        if self.path.exists():
            self.stages = json.loads(self.path.read_text(encoding="utf-8")).get("stages", {})

    def producer_hash(self, filename: str) -> str | None:
        for record in self.stages.values():
            if filename in record.get("outputs", {}):
                return record["outputs"][filename]
        return None

    def verify(self, path: Path) -> str:
        """Checksum of an input file, checked against the stage that produced it."""
        if not path.exists():
            raise MissingInput(str(path))
        digest = sha256_file(path)
        if path.parent == self.workdir:
            expected = self.producer_hash(path.name)
            if expected is not None and expected != digest:
                raise ChecksumMismatch(f"{path.name} does not match its manifest checksum")
        return digest

    def is_current(self, stage: str, inputs: dict[str, str], config: str) -> bool:
        record = self.stages.get(stage)
        if not record or record.get("inputs") != inputs or record.get("config") != config:
            return False
        for name, digest in record.get("outputs", {}).items():
            p = self.workdir / name
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, rec: StageRecord) -> None:
        self.stages[stage] = rec.to_dict()
        write_json(self.path, {"stages": {k: self.stages[k] for k in sorted(self.stages)}})
