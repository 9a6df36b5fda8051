"""Declarative persisted form of a pipeline: topology, specs, resources.

Top-level keys: `executors` (name -> {inproc, outproc, remote, stride}),
`pipers` (name -> {chain, executor, ordered, produce, spawn, consume,
timeout_ms}), `pipes` ([from, to] pairs, order significant because it
fixes inbox slot order), and `inputs` (root name -> inline list or an
"@file" reference holding one value per line).

load(save(p)) reproduces topology, specs, and executor configs exactly;
run state always resets to Created.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import (
    CycleRejected,
    DuplicateName,
    MalformedManifest,
    SelfLoop,
    UnknownExecutor,
    UnknownFunction,
    UnknownPiper,
)
from .executor import ExecutorConfig
from .pipeline import Pipeline, PiperSpec
from .worker import FunctionRef, WorkerChain, WorkerRegistry, default_registry


def save_manifest(pipeline: Pipeline) -> dict:
    """Serialize topology, specs, and executor configs to a plain document."""
    executors = {}
    for name, cfg in pipeline.executor_configs.items():
        executors[name] = {
            "inproc": cfg.lanes_inproc,
            "outproc": cfg.lanes_outproc,
            "remote": [f"{h}:{p}#{s}" for h, p, s in cfg.remote],
            "stride": cfg.stride,
        }
    pipers = {}
    for name, spec in pipeline.pipers.items():
        doc: dict[str, Any] = {
            "chain": [ref.to_wire() for ref in spec.chain.stages],
            "ordered": spec.ordered,
        }
        if spec.chain.handles_faults:
            doc["handles_faults"] = True
        if spec.executor_ref is not None:
            doc["executor"] = spec.executor_ref
        if spec.produce_n is not None:
            doc["produce"] = spec.produce_n
        if spec.spawn_n is not None:
            doc["spawn"] = spec.spawn_n
        if spec.consume_n is not None:
            doc["consume"] = spec.consume_n
        if spec.timeout_ms is not None:
            doc["timeout_ms"] = spec.timeout_ms
        pipers[name] = doc
    # Emit pipes grouped by target in incoming-edge insertion order; replaying
    # them rebuilds identical inbox slot orders.
    pipes = []
    for node in pipeline.dag.nodes():
        for pred in pipeline.dag.predecessors(node):
            pipes.append([pred.name, node.name])
    doc = {"executors": executors, "pipers": pipers, "pipes": pipes}
    if pipeline.manifest_inputs is not None:
        doc["inputs"] = pipeline.manifest_inputs
    return doc


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise MalformedManifest(message)


def _parse_remote_entry(text: str) -> tuple[str, int, int]:
    from .cli import parse_workers_arg

    entries = parse_workers_arg(text).entries
    _require(len(entries) == 1, f"remote entry {text!r} must be a single host:port#slots")
    return entries[0]


def load_manifest(doc: dict, registry: WorkerRegistry | None = None) -> Pipeline:
    """Build a fresh pipeline (state Created) from a manifest document."""
    registry = registry or default_registry()
    _require(isinstance(doc, dict), "manifest must be an object")
    for key in doc:
        _require(key in ("executors", "pipers", "pipes", "inputs"),
                 f"unknown top-level key {key!r}")
    executors_doc = doc.get("executors", {})
    pipers_doc = doc.get("pipers", {})
    pipes_doc = doc.get("pipes", [])
    _require(isinstance(executors_doc, dict), "'executors' must be an object")
    _require(isinstance(pipers_doc, dict) and pipers_doc, "'pipers' must be a non-empty object")
    _require(isinstance(pipes_doc, list), "'pipes' must be a list")

    pipeline = Pipeline(registry=registry)
    try:
        for name, body in executors_doc.items():
            _require(isinstance(body, dict), f"executor {name!r} must be an object")
            remote = body.get("remote", [])
            _require(isinstance(remote, list), f"executor {name!r}: 'remote' must be a list")
            config = ExecutorConfig(
                lanes_inproc=int(body.get("inproc", 0)),
                lanes_outproc=int(body.get("outproc", 0)),
                remote=[_parse_remote_entry(str(entry)) for entry in remote],
                stride=int(body.get("stride", 1)),
                name=str(name),
            )
            pipeline.add_executor(name, config)

        for name, body in pipers_doc.items():
            _require(isinstance(body, dict), f"piper {name!r} must be an object")
            chain_doc = body.get("chain")
            _require(isinstance(chain_doc, list) and chain_doc,
                     f"piper {name!r}: 'chain' must be a non-empty list")
            stages = []
            for stage in chain_doc:
                _require(isinstance(stage, dict) and "fn" in stage,
                         f"piper {name!r}: every stage needs an 'fn' key")
                kwargs = stage.get("kwargs", {})
                _require(isinstance(kwargs, dict),
                         f"piper {name!r}: stage kwargs must be an object")
                fn_name = str(stage["fn"])
                if fn_name not in registry:
                    raise UnknownFunction(
                        f"piper {name!r} references unknown worker {fn_name!r}")
                stages.append(FunctionRef(fn_name, kwargs))
            executor_ref = body.get("executor")
            if executor_ref is not None:
                executor_ref = str(executor_ref)
                if executor_ref not in pipeline.executor_configs:
                    raise UnknownExecutor(
                        f"piper {name!r} references unknown executor {executor_ref!r}")

            def _opt_int(key):
                value = body.get(key)
                if value is None:
                    return None
                _require(isinstance(value, int) and not isinstance(value, bool),
                         f"piper {name!r}: {key!r} must be an integer")
                return value

            spec = PiperSpec(
                name=str(name),
                chain=WorkerChain(stages=tuple(stages),
                                  handles_faults=bool(body.get("handles_faults", False))),
                executor_ref=executor_ref,
                ordered=bool(body.get("ordered", True)),
                produce_n=_opt_int("produce"),
                spawn_n=_opt_int("spawn"),
                consume_n=_opt_int("consume"),
                timeout_ms=_opt_int("timeout_ms"),
            )
            pipeline.add_piper(spec)

        for pipe in pipes_doc:
            _require(isinstance(pipe, (list, tuple)) and len(pipe) == 2,
                     f"pipe {pipe!r} must be a [from, to] pair")
            try:
                pipeline.add_pipe(str(pipe[0]), str(pipe[1]))
            except UnknownPiper as exc:
                raise MalformedManifest(str(exc)) from exc
    except (DuplicateName, SelfLoop) as exc:
        raise MalformedManifest(str(exc)) from exc
    except CycleRejected as exc:
        raise MalformedManifest(f"pipes close a cycle: {exc}") from exc
    except (TypeError, ValueError, AttributeError) as exc:
        raise MalformedManifest(f"bad manifest value: {exc}") from exc

    inputs_doc = doc.get("inputs")
    if inputs_doc is not None:
        _require(isinstance(inputs_doc, dict), "'inputs' must be an object")
        roots = {r.name for r in pipeline.dag.roots()}
        for root in inputs_doc:
            _require(root in roots, f"'inputs' names {root!r}, which is not an input piper")
        pipeline.manifest_inputs = dict(inputs_doc)
    return pipeline


def resolve_inputs(pipeline: Pipeline, base_dir: str | Path = ".") -> list[list]:
    """Materialize manifest inputs (inline lists or @file refs) in root order."""
    if pipeline.manifest_inputs is None:
        raise MalformedManifest("manifest defines no 'inputs'")
    collections = []
    for root in pipeline.dag.roots():
        spec = pipeline.manifest_inputs.get(root.name)
        if spec is None:
            raise MalformedManifest(f"no input collection for root piper {root.name!r}")
        if isinstance(spec, list):
            collections.append(list(spec))
        elif isinstance(spec, str) and spec.startswith("@"):
            path = Path(base_dir) / spec[1:]
            try:
                lines = path.read_text(encoding="utf-8").splitlines()
            except OSError as exc:
                raise MalformedManifest(f"cannot read input file {path}: {exc}") from exc
            values = []
            for line in lines:
                if not line.strip():
                    continue
                try:
                    values.append(json.loads(line))
                except json.JSONDecodeError:
                    values.append(line)
            collections.append(values)
        else:
            raise MalformedManifest(
                f"input for {root.name!r} must be a list or an '@file' reference")
    return collections
