"""Command-line front door: run pipelines from manifests, serve remote
workers, validate manifests.

Exit codes for `run`: 0 when no fault reached a leaf, 2 when the run
completed but produced leaf faults, 1 when the pipeline could not run at
all (bad manifest, validation failure, unreachable resources).
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, replace

from . import log
from .errors import (
    FlowpipeError,
    MalformedManifest,
    MalformedWorkersArg,
    PortInUse,
    UnknownExecutor,
    UnknownFunction,
)
from .manifest import load_manifest, resolve_inputs
from .worker import FunctionRef, WorkerChain, default_registry, import_registry_modules

_WORKERS_ENTRY = re.compile(r"^(?P<host>[^:#,\s]+):(?P<port>\d+)#(?P<slots>\d+)$")


@dataclass
class WorkersArg:
    """Parsed --workers value: (host, port, slots) per comma-separated entry."""

    entries: list[tuple[str, int, int]]


def parse_workers_arg(text: str) -> WorkersArg:
    """Parse `host:port#slots[,host:port#slots...]` exactly; anything else
    is rejected with the offending fragment and its position."""
    if not text:
        raise MalformedWorkersArg("empty --workers value")
    entries = []
    for pos, fragment in enumerate(text.split(",")):
        match = _WORKERS_ENTRY.match(fragment)
        if match is None:
            raise MalformedWorkersArg(
                f"entry {pos + 1} ({fragment!r}) does not match host:port#slots")
        port = int(match["port"])
        slots = int(match["slots"])
        if not 0 < port < 65536:
            raise MalformedWorkersArg(f"entry {pos + 1}: port {port} out of range")
        if slots < 1:
            raise MalformedWorkersArg(f"entry {pos + 1}: slots must be >= 1, got {slots}")
        entries.append((match["host"], port, slots))
    return WorkersArg(entries)


def format_workers_arg(arg: WorkersArg) -> str:
    return ",".join(f"{h}:{p}#{s}" for h, p, s in arg.entries)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _rewrite_for_tcp(pipeline) -> None:
    """Make every cross-executor pipe hand its payload over a direct socket:
    the producer chain gains a trailing io.dump_item, the consumer chain a
    leading io.load_item."""
    dump = FunctionRef("io.dump_item", {"type": "socket"})
    load = FunctionRef("io.load_item", {})
    producers = set()
    consumers = set()
    for u, v in pipeline.dag.edges():
        if pipeline.pipers[u.name].executor_ref != pipeline.pipers[v.name].executor_ref:
            producers.add(u.name)
            consumers.add(v.name)
    for name in producers:
        spec = pipeline.pipers[name]
        if spec.chain.stages[-1].name != "io.dump_item":
            spec.chain = WorkerChain(spec.chain.stages + (dump,),
                                     spec.chain.handles_faults)
    for name in consumers:
        spec = pipeline.pipers[name]
        if spec.chain.stages[0].name != "io.load_item":
            spec.chain = WorkerChain((load,) + spec.chain.stages,
                                     spec.chain.handles_faults)


def _stats_doc(pipeline) -> dict:
    stats = pipeline.stats()
    return {
        "started_at": stats.started_at,
        "ended_at": stats.ended_at,
        "pipers": {
            name: {
                "items_in": s.items_in,
                "items_out": s.items_out,
                "faults_out": s.faults_out,
                "timeouts": s.timeouts,
                "wall_ms_total": round(s.wall_ms_total, 3),
                "p50_ms": round(s.p50_ms, 3),
                "p95_ms": round(s.p95_ms, 3),
            }
            for name, s in stats.pipers.items()
        },
    }


def cmd_run(manifest_path: str, workers: WorkersArg | None = None,
            use_tcp: bool = False, log_level: str = log.INFO,
            stats_out: str | None = None) -> int:
    log.log_setup("stderr", log_level)
    from pathlib import Path

    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cli", f"cannot read manifest {manifest_path}: {exc}")
        return 1
    try:
        pipeline = load_manifest(doc)
    except (MalformedManifest, UnknownFunction, UnknownExecutor) as exc:
        log.error("cli", f"bad manifest: {exc}")
        return 1

    if workers is not None:
        for name, config in pipeline.executor_configs.items():
            pipeline.executor_configs[name] = replace(
                config, remote=list(config.remote) + workers.entries)
    if use_tcp:
        _rewrite_for_tcp(pipeline)

    report = pipeline.validate()
    if not report.ok:
        for violation in report.violations:
            log.error("cli", violation)
        return 1
    try:
        inputs = resolve_inputs(pipeline, base_dir=path.parent)
        pipeline.start(inputs)
        pipeline.run()
        pipeline.wait()
    except FlowpipeError as exc:
        log.error("cli", f"run failed: {exc}")
        return 1

    doc = _stats_doc(pipeline)
    print(json.dumps(doc, indent=2))
    if stats_out:
        try:
            Path(stats_out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
        except OSError as exc:
            log.error("cli", f"cannot write stats to {stats_out}: {exc}")
    leaf_faults = sum(1 for envs in pipeline.results.values()
                      for env in envs if env.is_fault)
    if leaf_faults:
        log.error("cli", f"{leaf_faults} fault(s) reached pipeline outputs")
        return 2
    return 0


def cmd_serve(port: int, slots: int, log_level: str = log.INFO,
              registry_modules: list[str] | None = None,
              host: str = "127.0.0.1") -> int:
    log.log_setup("stderr", log_level)
    from .remote import serve

    if registry_modules:
        import_registry_modules(registry_modules)
    try:
        serve(default_registry(), port=port, slots=slots, host=host,
              announce=lambda srv: print(f"LISTENING {srv.port}", flush=True))
    except PortInUse as exc:
        log.error("cli", str(exc))
        return 1
    except KeyboardInterrupt:
        pass
    return 0


def cmd_validate(manifest_path: str) -> int:
    try:
        doc = json.loads(open(manifest_path, encoding="utf-8").read())
        pipeline = load_manifest(doc)
    except (OSError, json.JSONDecodeError, MalformedManifest,
            UnknownFunction, UnknownExecutor) as exc:
        print(f"invalid: {exc}")
        return 1
    report = pipeline.validate()
    print(str(report))
    return 0 if report.ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowpipe",
        description="Run, serve, and validate dataflow pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a pipeline manifest to completion")
    p_run.add_argument("manifest")
    p_run.add_argument("--workers", type=parse_workers_arg, default=None,
                       metavar="H:P#S,...",
                       help="append remote lanes to every executor")
    p_run.add_argument("--use_tcp", type=_parse_bool, default=False,
                       metavar="BOOL",
                       help="move cross-executor payloads over direct sockets")
    p_run.add_argument("--log-level", default=log.INFO,
                       choices=[log.DEBUG, log.INFO, log.ERROR])
    p_run.add_argument("--stats-out", default=None, metavar="PATH")

    p_serve = sub.add_parser("serve", help="serve registered workers to remote pipelines")
    p_serve.add_argument("--port", type=int, required=True)
    p_serve.add_argument("--slots", type=int, default=1)
    p_serve.add_argument("--log-level", default=log.INFO,
                         choices=[log.DEBUG, log.INFO, log.ERROR])
    p_serve.add_argument("--registry", action="append", default=[],
                         metavar="MODULE",
                         help="import MODULE at startup to register extra workers")
    p_serve.add_argument("--host", default="127.0.0.1")

    p_val = sub.add_parser("validate", help="check a manifest without running it")
    p_val.add_argument("manifest")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.manifest, workers=args.workers, use_tcp=args.use_tcp,
                           log_level=args.log_level, stats_out=args.stats_out)
        if args.command == "serve":
            return cmd_serve(args.port, args.slots, log_level=args.log_level,
                             registry_modules=args.registry, host=args.host)
        return cmd_validate(args.manifest)
    except MalformedWorkersArg as exc:
        parser.error(str(exc))
        return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
