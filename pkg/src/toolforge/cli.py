"""Command line entry point: ``toolforge <stage> --config <path> [--seed N]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .apihub import BindError, Deterministic, FixtureUpstream, HttpExecutor, RegistryExecutor, ToolRegistry
from .pipeline import STAGES, StageFailed, run_pipeline
from .store import ChecksumMismatch, ConfigError, MissingInput, load_config

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _report_error(exc: BaseException, stage: str | None) -> int:
    cause = exc.cause if isinstance(exc, StageFailed) else exc
    stage = exc.stage if isinstance(exc, StageFailed) else stage
    if isinstance(cause, ConfigError):
        code = EXIT_CONFIG
    elif isinstance(cause, MissingInput):
        code = EXIT_MISSING
    else:
        code = EXIT_FAILED
    doc = {"error": type(cause).__name__, "message": str(cause), "stage": stage, "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline TOML file")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
    p.add_argument("--quality-threshold", type=int, help="minimum query quality score (default 8)")
    p.add_argument("--swap-fraction", type=float, help="share of comparisons re-judged with swapped positions")
    p.add_argument("--judge-backend", help="backend role to use as judge")
    p.add_argument("--workers", type=int, help="parallel tasks within a stage")
    p.add_argument("--no-interleave", action="store_true", help="concatenate V then R records in the SFT export")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("all",):
        _add_config_args(sub.add_parser(stage, help=f"run the {stage} stage" if stage != "all" else "run every stage"))
    ev = sub.add_parser("eval", help="evaluation stages")
    ev.add_argument("metric", choices=["pass", "win", "refine"])
    _add_config_args(ev)
    serve = sub.add_parser("serve", help="serve a registry over HTTP")
    serve.add_argument("--registry", required=True, help="JSONL file of tool specs")
    serve.add_argument("--bind", default="127.0.0.1:8000")
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--mode", choices=["live", "sim", "auto"], default="auto")
    serve.add_argument("--upstream", help="fixture JSON of upstream behaviors, or an http:// URL")
    corpus = sub.add_parser("mini-corpus", help="write the bundled mini-corpus, scripts and config")
    corpus.add_argument("directory")
    return parser


def _load(args: argparse.Namespace):
    env = dict(os.environ)
    if args.quality_threshold is not None:
        env["TOOLFORGE__QUERY__THRESHOLD"] = str(args.quality_threshold)
    if args.swap_fraction is not None:
        env["TOOLFORGE__EVAL__SWAP_FRACTION"] = str(args.swap_fraction)
    if args.workers is not None:
        env["TOOLFORGE__WORKERS"] = str(args.workers)
    if args.no_interleave:
        env["TOOLFORGE__EXPORT__INTERLEAVE"] = "false"
    cfg = load_config(args.config, env, args.seed)
    if args.judge_backend:
        if args.judge_backend not in cfg.backends:
            raise ConfigError(f"no backend role {args.judge_backend!r} to use as judge")
        raw = {**cfg.raw, "judge_backend": args.judge_backend}
        cfg = dataclasses.replace(cfg, backends={**cfg.backends, "judge": cfg.backends[args.judge_backend]}, raw=raw)
    return cfg


def _serve(args: argparse.Namespace) -> int:
    from .server import make_server

    registry = ToolRegistry.load_jsonl(args.registry)
    upstream = None
    if args.upstream:
        if args.upstream.startswith(("http://", "https://")):
            upstream = HttpExecutor(args.upstream)
        else:
            doc = json.loads(Path(args.upstream).read_text(encoding="utf-8"))
            upstream = FixtureUpstream(registry, doc.get("behaviors", {}), int(doc.get("seed", args.seed)))
    host, _, port = args.bind.rpartition(":")
    executor = RegistryExecutor(registry, Deterministic(args.seed), upstream, args.mode)
    httpd = make_server(registry, (host or "127.0.0.1", int(port)), executor)
    print(json.dumps({"url": f"http://{httpd.server_address[0]}:{httpd.server_address[1]}"}), flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    stage = None
    try:
        if args.command == "serve":
            return _serve(args)
        if args.command == "mini-corpus":
            from .minicorpus import materialize

            print(json.dumps({"config": str(materialize(args.directory))}))
            return 0
        if args.command == "eval":
            stages = [f"eval-{args.metric}"]
        elif args.command == "all":
            stages = None
        else:
            stages = [args.command]
        stage = args.command
        cfg = _load(args)
        for result in run_pipeline(cfg, stages, args.force):
            print(json.dumps(result, sort_keys=True))
        return 0
    except (ConfigError, MissingInput, StageFailed, ChecksumMismatch, BindError, OSError, ValueError) as exc:
        return _report_error(exc, stage)


if __name__ == "__main__":
    sys.exit(main())
