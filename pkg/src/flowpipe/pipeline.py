"""Pipeline runtime: assembles piper specs and pipes into a validated DAG,
binds pipers to executors in topological order, scatters and gathers
per-item sub-work, and drives the lifecycle.

Data moves between nodes through per-node output streams.  Parallel
pipers evaluate on executor lanes; their task sources pull complete
inboxes straight out of upstream streams.  Serial pipers (no
executor_ref) evaluate inside the manager pump thread between rounds.
The pump also moves finished lane results into node streams -- bounded
by the downstream backlog so the stride memory trade-off holds end to
end -- and collects leaf deliveries.

Lock order: the pipeline condition may be held while touching an
executor, never the reverse; executor threads reach the pipeline only
through lock-free progress callbacks.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

from . import log
from .dag import Dag
from .envelope import USER_ERROR, Envelope, FaultInfo, new_fault, payload
from .errors import (
    DuplicateName,
    IllegalState,
    InputArityMismatch,
    UnknownPiper,
    Unreachable,
)
from .executor import (
    EMPTY,
    END,
    END_OF_STREAM,
    ITEM,
    PENDING,
    Executor,
    ExecutorConfig,
    Pull,
    PULL_EMPTY,
    PULL_END,
    PULL_PENDING,
    TaskHandle,
    WorkUnit,
)
from .worker import WorkerChain, WorkerRegistry, apply_chain, default_registry

_SERIAL_BACKLOG = 32


class RunState(Enum):
    CREATED = "Created"
    VALIDATED = "Validated"
    RUNNING = "Running"
    PAUSED = "Paused"
    FINISHED = "Finished"
    STOPPED = "Stopped"


@dataclass
class PiperSpec:
    """A node: a worker chain plus execution flags.

    executor_ref absent means serial evaluation in the manager context,
    which is inherently ordered.  produce_n/spawn_n/consume_n mark the
    scatter/gather idiom; at most one of produce_n/consume_n may be set.
    """

    name: str
    chain: WorkerChain
    executor_ref: Optional[str] = None
    ordered: bool = True
    produce_n: Optional[int] = None
    spawn_n: Optional[int] = None
    consume_n: Optional[int] = None
    timeout_ms: Optional[int] = None

    @property
    def serial(self) -> bool:
        return self.executor_ref is None


@dataclass
class PiperStats:
    items_in: int = 0
    items_out: int = 0
    faults_out: int = 0
    timeouts: int = 0
    wall_ms_total: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0


@dataclass
class RunStats:
    pipers: dict[str, PiperStats] = field(default_factory=dict)
    started_at: Optional[float] = None
    ended_at: Optional[float] = None


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"- {v}" for v in self.violations)


class _Stream:
    """Append-only envelope buffer with one cursor per registered consumer."""

    __slots__ = ("envelopes", "ended", "cursors")

    def __init__(self):
        self.envelopes: list[Envelope] = []
        self.ended = False
        self.cursors: dict[str, int] = {}

    @property
    def appended(self) -> int:
        return len(self.envelopes)

    def backlog(self) -> int:
        if not self.cursors:
            return 0
        return self.appended - min(self.cursors.values())

    def fully_consumed(self) -> bool:
        return all(pos >= self.appended for pos in self.cursors.values())


class _NodeRuntime:
    """Per-run execution state of one piper."""

    def __init__(self, spec: PiperSpec, preds: list[str], succs: list[str]):
        self.spec = spec
        self.preds = preds
        self.succs = succs
        self.stream = _Stream()
        self.instance_streams: list[_Stream] = []   # spawn pipers only
        self.handle: Optional[TaskHandle] = None
        self.instance_handles: list[TaskHandle] = []
        self.executor: Optional[Executor] = None
        self.inputs: list | None = None              # roots only
        self.pulled = 0                              # root items consumed
        self.eval_pos = 0                            # serial evaluation cursor
        self.instance_eval_pos: list[int] = []
        self.scatter_faults: dict[int, FaultInfo] = {}  # parent -> shared mismatch fault
        self.stats = PiperStats()
        self.latencies: list[float] = []             # serial latencies (ms)

    @property
    def is_spawn(self) -> bool:
        return self.spec.spawn_n is not None

    @property
    def is_consume(self) -> bool:
        return self.spec.consume_n is not None


class Pipeline:
    """Monitorable, runnable workflow over a DAG of pipers.

    Lifecycle: Created -validate-> Validated -start(inputs)/run-> Running
    -wait-> Finished; Running -pause-> Paused -run-> Running;
    Paused -stop-> Stopped.  A running pipeline cannot be stopped, and
    Finished/Stopped are terminal.
    """

    def __init__(self, registry: WorkerRegistry | None = None, name: str = "pipeline"):
        self.name = name
        self.registry = registry or default_registry()
        self.dag = Dag()
        self.pipers: dict[str, PiperSpec] = {}
        self.executor_configs: dict[str, ExecutorConfig] = {}
        self.manifest_inputs: dict[str, Any] | None = None
        self.state = RunState.CREATED
        self.results: dict[str, list[Envelope]] = {}

        self._cond = threading.Condition()
        self._nodes: dict[str, _NodeRuntime] = {}
        self._executors: dict[str, Executor] = {}
        self._gate_open = False
        self._bound = False
        self._run_registry: WorkerRegistry | None = None
        self._pump: Optional[threading.Thread] = None
        self._pump_stop = False
        self._started_at: Optional[float] = None
        self._ended_at: Optional[float] = None

    # -- construction -----------------------------------------------------------

    def _mutable(self) -> None:
        if self.state not in (RunState.CREATED, RunState.VALIDATED):
            raise IllegalState(f"cannot edit topology in state {self.state.value}")
        self.state = RunState.CREATED  # any edit invalidates

    def add_executor(self, name: str, config: ExecutorConfig) -> None:
        self._mutable()
        if name in self.executor_configs:
            raise DuplicateName(f"executor {name!r} already defined")
        self.executor_configs[name] = config

    def add_piper(self, spec: PiperSpec) -> None:
        self._mutable()
        self.dag.add_node(spec.name)
        self.pipers[spec.name] = spec

    def del_piper(self, name: str) -> None:
        self._mutable()
        if name not in self.pipers:
            raise UnknownPiper(f"no piper named {name!r}")
        self.dag.remove_node(name)
        del self.pipers[name]

    def add_pipe(self, from_name: str, to_name: str) -> None:
        self._mutable()
        for name in (from_name, to_name):
            if name not in self.pipers:
                raise UnknownPiper(f"no piper named {name!r}")
        self.dag.add_edge(from_name, to_name)

    # -- validation ----------------------------------------------------------------

    def validate(self) -> ValidationReport:
        """Check the whole pipeline; on success state moves to Validated."""
        if self.state is not RunState.CREATED:
            raise IllegalState(f"validate() requires Created, not {self.state.value}")
        report = ValidationReport()
        if len(self.dag) == 0:
            report.add("pipeline has no pipers")
        cycle = self.dag.find_cycle()
        if cycle is not None:
            report.add("cycle: " + " -> ".join(cycle))

        remote_names = self._advertised_remote_names(report)
        for name, spec in self.pipers.items():
            for fn_name in spec.chain.names():
                if fn_name not in self.registry:
                    report.add(f"piper {name!r} references unknown worker {fn_name!r}")
            if spec.executor_ref is not None:
                if spec.executor_ref not in self.executor_configs:
                    report.add(f"piper {name!r} references unknown executor "
                               f"{spec.executor_ref!r}")
                else:
                    for host, port, advertised in remote_names.get(spec.executor_ref, ()):
                        missing = [n for n in spec.chain.names() if n not in advertised]
                        if missing:
                            report.add(
                                f"piper {name!r}: workers {missing} not registered on "
                                f"{host}:{port}")
            self._check_scatter_shape(name, spec, report)

        for node in self.dag.nodes():
            preds = self.dag.predecessors(node)
            if len(preds) > 1:
                unordered = [p.name for p in preds
                             if not self.pipers[p.name].serial
                             and not self.pipers[p.name].ordered]
                if unordered:
                    report.add(
                        f"piper {node.name!r} joins multiple pipes but upstream "
                        f"{unordered} deliver in completion order; joins need "
                        f"ordered upstreams")
        # Every root reaches at least one output by DAG construction; kept
        # as a belt-and-braces check for manifest-loaded graphs.
        for root in self.dag.roots():
            if not self._reaches_leaf(root.name):
                report.add(f"input piper {root.name!r} reaches no output")

        if report.ok:
            self.state = RunState.VALIDATED
        return report

    def _reaches_leaf(self, name: str) -> bool:
        stack = [name]
        seen = set()
        while stack:
            cur = stack.pop()
            succs = self.dag.successors(cur)
            if not succs:
                return True
            stack.extend(s.name for s in succs if s.name not in seen)
            seen.update(s.name for s in succs)
        return False

    def _advertised_remote_names(self, report: ValidationReport) -> dict:
        """Transient handshake with every remote server named by executors."""
        from .remote import connect

        names: dict[str, list[tuple[str, int, set[str]]]] = {}
        for ref, config in self.executor_configs.items():
            entries = []
            for host, port, _slots in config.remote:
                try:
                    pool = connect(host, port, client_name=f"{self.name}-validate")
                except Unreachable as exc:
                    report.add(f"executor {ref!r}: remote {host}:{port} unreachable: {exc}")
                    continue
                entries.append((host, port, set(pool.worker_names)))
                pool.close()
            names[ref] = entries
        return names

    def _check_scatter_shape(self, name: str, spec: PiperSpec,
                             report: ValidationReport) -> None:
        for label, n in (("produce_n", spec.produce_n), ("spawn_n", spec.spawn_n),
                         ("consume_n", spec.consume_n)):
            if n is not None and n < 2:
                report.add(f"piper {name!r}: {label} must be >= 2, got {n}")
        if spec.produce_n is not None and spec.consume_n is not None:
            report.add(f"piper {name!r} sets both produce_n and consume_n")
        if spec.spawn_n is not None and (spec.produce_n is not None
                                         or spec.consume_n is not None):
            report.add(f"piper {name!r}: spawn pipers cannot nest produce/consume")
        if name not in self.dag:
            return
        preds = [p.name for p in self.dag.predecessors(name)]
        succs = [s.name for s in self.dag.successors(name)]
        if spec.spawn_n is not None:
            bad_pred = (len(preds) != 1
                        or self.pipers[preds[0]].produce_n != spec.spawn_n)
            if bad_pred:
                report.add(f"piper {name!r}: spawn_n={spec.spawn_n} requires exactly one "
                           f"upstream piper with produce_n={spec.spawn_n}")
            bad_succ = (len(succs) != 1
                        or self.pipers[succs[0]].consume_n != spec.spawn_n)
            if bad_succ:
                report.add(f"piper {name!r}: spawn_n={spec.spawn_n} requires exactly one "
                           f"downstream piper with consume_n={spec.spawn_n}")
        if spec.produce_n is not None:
            if not succs or any(self.pipers[s].spawn_n != spec.produce_n for s in succs):
                report.add(f"piper {name!r}: produce_n={spec.produce_n} requires every "
                           f"downstream piper to set spawn_n={spec.produce_n}")
        if spec.consume_n is not None:
            if not preds or any(self.pipers[p].spawn_n != spec.consume_n for p in preds):
                report.add(f"piper {name!r}: consume_n={spec.consume_n} requires every "
                           f"upstream piper to set spawn_n={spec.consume_n}")

    # -- lifecycle -------------------------------------------------------------------

    def start(self, inputs: Sequence[Iterable]) -> None:
        """Bind inputs and provision resources; run() opens the flow."""
        if self.state is not RunState.VALIDATED or self._bound:
            raise IllegalState(f"start() requires a freshly validated pipeline "
                               f"(state is {self.state.value})")
        roots = self.dag.roots()
        if len(inputs) != len(roots):
            raise InputArityMismatch(
                f"{len(roots)} input piper(s) but {len(inputs)} input collection(s)")
        self._run_registry = self.registry.snapshot()

        for name in self.pipers:
            self._nodes[name] = _NodeRuntime(
                self.pipers[name],
                preds=[p.name for p in self.dag.predecessors(name)],
                succs=[s.name for s in self.dag.successors(name)],
            )
        for root, collection in zip(roots, inputs):
            self._nodes[root.name].inputs = list(collection)

        refs = {spec.executor_ref for spec in self.pipers.values()
                if spec.executor_ref is not None}
        for ref in sorted(refs):
            self._executors[ref] = Executor(self.executor_configs[ref], self._run_registry)

        # Streams / cursors, then tasks in topological order (this fixes
        # task_seq and with it the stride rotation order).
        order = [n.name for n in self.dag.topo_sort()]
        for name in order:
            self._wire_consumers(name)
        for name in order:
            self._register_tasks(name)
        for node in self._nodes.values():
            if node.spec.executor_ref is not None:
                node.executor = self._executors[node.spec.executor_ref]
        for executor in self._executors.values():
            executor.start()

        self.results = {leaf.name: [] for leaf in self.dag.leaves()}
        self._bound = True
        self._pump = threading.Thread(target=self._pump_loop,
                                      name=f"{self.name}-pump", daemon=True)
        self._pump.start()

    def _wire_consumers(self, name: str) -> None:
        node = self._nodes[name]
        spec = node.spec
        if node.is_spawn:
            n = spec.spawn_n
            node.instance_streams = [_Stream() for _ in range(n)]
            node.instance_eval_pos = [0] * n
            producer = self._nodes[node.preds[0]]
            for j in range(n):
                producer.stream.cursors[f"{name}#{j}"] = 0
            consumer = node.succs[0]
            for j in range(n):
                node.instance_streams[j].cursors[consumer] = 0
        else:
            for pred in node.preds:
                pred_node = self._nodes[pred]
                if not pred_node.is_spawn:
                    pred_node.stream.cursors[name] = 0
            if not node.succs:
                node.stream.cursors["__collector__"] = 0

    def _register_tasks(self, name: str) -> None:
        node = self._nodes[name]
        spec = node.spec
        if spec.serial:
            return
        executor = self._executors[spec.executor_ref]
        if node.is_spawn:
            for j in range(spec.spawn_n):
                handle = TaskHandle(_ScatterSource(self, name, j), ordered=spec.ordered,
                                    timeout_ms=spec.timeout_ms, name=f"{name}#{j}")
                handle.on_progress = self._kick
                node.instance_handles.append(executor.attach_task(handle))
            return
        if node.inputs is not None and not node.preds:
            source = _RootSource(self, name)
        elif node.is_consume:
            source = _GatherSource(self, name)
        else:
            source = _JoinSource(self, name)
        handle = TaskHandle(source, ordered=spec.ordered,
                            timeout_ms=spec.timeout_ms, name=name)
        handle.on_progress = self._kick
        node.handle = executor.attach_task(handle)

    def run(self) -> None:
        """Open the pumps (from Validated-with-bound-inputs or Paused)."""
        with self._cond:
            if self.state is RunState.VALIDATED and self._bound:
                self._started_at = time.time()
            elif self.state is RunState.PAUSED:
                pass
            else:
                raise IllegalState(f"run() is illegal in state {self.state.value}")
            self.state = RunState.RUNNING
            self._gate_open = True
            self._cond.notify_all()
        for executor in self._executors.values():
            executor.kick()

    def wait(self) -> None:
        """Block until every descendant of every input item has reached a leaf."""
        with self._cond:
            if self.state is not RunState.RUNNING:
                raise IllegalState(f"wait() is illegal in state {self.state.value}")
            while self.state is RunState.RUNNING:
                self._cond.wait()

    def pause(self) -> None:
        """Close the input gates; in-flight items drain to their next boundary."""
        with self._cond:
            if self.state is not RunState.RUNNING:
                raise IllegalState(f"pause() is illegal in state {self.state.value}")
            self._gate_open = False
            self.state = RunState.PAUSED
            self._cond.notify_all()
        for executor in self._executors.values():
            executor.kick()

    def stop(self) -> None:
        """Stop a paused pipeline; every dispatched item is delivered first."""
        with self._cond:
            if self.state is not RunState.PAUSED:
                raise IllegalState(
                    f"stop() is illegal in state {self.state.value}"
                    + (" (a running pipeline cannot be stopped)"
                       if self.state is RunState.RUNNING else ""))
            self._pump_stop = True
            self._cond.notify_all()
        if self._pump is not None:
            self._pump.join()
        for executor in self._executors.values():
            executor.stop(drain=True)
        while self._sweep():
            pass
        with self._cond:
            self._ended_at = time.time()
            self.state = RunState.STOPPED
            self._cond.notify_all()
        log.info(self.name, "pipeline stopped; dispatched work delivered")

    # -- the manager pump ---------------------------------------------------------------

    def _kick(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def _pump_loop(self) -> None:
        while True:
            with self._cond:
                if self._pump_stop:
                    return
            progressed = self._sweep()
            if progressed:
                for executor in self._executors.values():
                    executor.kick()
            with self._cond:
                if self._pump_stop:
                    return
                if self.state is RunState.RUNNING and self._finished_locked():
                    self._ended_at = time.time()
                    self.state = RunState.FINISHED
                    self._cond.notify_all()
                    break
                if not progressed:
                    self._cond.wait(timeout=0.02)
        for executor in self._executors.values():
            executor.stop(drain=True)
        log.info(self.name, "pipeline finished")

    def _finished_locked(self) -> bool:
        for node in self._nodes.values():
            if node.is_spawn:
                if not all(s.ended and s.fully_consumed() for s in node.instance_streams):
                    return False
            else:
                if not (node.stream.ended and node.stream.fully_consumed()):
                    return False
        return True

    def _sweep(self) -> bool:
        """One pass over all nodes in topo order; True if anything moved."""
        progressed = False
        for node_id in self.dag.topo_sort():
            node = self._nodes[node_id.name]
            if node.spec.serial:
                progressed |= self._sweep_serial(node_id.name, node)
            else:
                progressed |= self._collect_parallel(node_id.name, node)
            if not node.succs and not node.is_spawn:
                progressed |= self._collect_leaf(node_id.name, node)
        return progressed

    def _move_bound(self, node: _NodeRuntime) -> int:
        if node.executor is not None:
            return node.executor.config.stride + node.executor.total_lanes
        return _SERIAL_BACKLOG

    def _collect_parallel(self, name: str, node: _NodeRuntime) -> bool:
        """Move deliverable lane results into this node's stream(s)."""
        progressed = False
        bound = self._move_bound(node)
        pairs = ([(node.stream, node.handle)] if not node.is_spawn
                 else list(zip(node.instance_streams, node.instance_handles)))
        for stream, handle in pairs:
            if handle is None:
                continue
            while not stream.ended:
                with self._cond:
                    # Backpressure applies only while flowing; paused or
                    # stopping pipelines drain everything to the boundary.
                    if (self._gate_open and stream.cursors
                            and stream.backlog() >= bound):
                        break
                result = node.executor.try_next(handle)
                if result is None:
                    break
                if result is END_OF_STREAM:
                    with self._cond:
                        stream.ended = True
                        self._cond.notify_all()
                    progressed = True
                    break
                self._append(node, stream, result)
                progressed = True
        return progressed

    def _append(self, node: _NodeRuntime, stream: _Stream, env: Envelope) -> None:
        with self._cond:
            stream.envelopes.append(env)
            node.stats.items_out += 1
            if env.is_fault:
                node.stats.faults_out += 1
                if env.fault.error_class == "timeout":
                    node.stats.timeouts += 1
            self._cond.notify_all()

    def _collect_leaf(self, name: str, node: _NodeRuntime) -> bool:
        progressed = False
        with self._cond:
            stream = node.stream
            pos = stream.cursors["__collector__"]
            while pos < stream.appended:
                self.results[name].append(stream.envelopes[pos])
                pos += 1
                progressed = True
            stream.cursors["__collector__"] = pos
            if progressed:
                self._cond.notify_all()
        return progressed

    # -- serial evaluation ----------------------------------------------------------

    def _sweep_serial(self, name: str, node: _NodeRuntime) -> bool:
        if node.is_spawn:
            return self._sweep_serial_spawn(name, node)
        progressed = False
        while True:
            with self._cond:
                if not self._gate_open or node.stream.ended:
                    break
                if node.stream.cursors and node.stream.backlog() >= _SERIAL_BACKLOG:
                    break
                if node.inputs is not None and not node.preds:
                    status, inbox = self._root_take(node)
                elif node.is_consume:
                    status, inbox = self._gather_take(name, node, node.eval_pos)
                else:
                    status, inbox = self._join_take(name, node, node.eval_pos)
                if status == "end":
                    node.stream.ended = True
                    self._cond.notify_all()
                    break
                if status != "item":
                    break
                node.eval_pos += 1
                node.stats.items_in += 1
            env = self._evaluate_serial(name, node, inbox)
            self._append(node, node.stream, env)
            progressed = True
        return progressed

    def _sweep_serial_spawn(self, name: str, node: _NodeRuntime) -> bool:
        progressed = False
        for j, stream in enumerate(node.instance_streams):
            while True:
                with self._cond:
                    if not self._gate_open or stream.ended:
                        break
                    if stream.cursors and stream.backlog() >= _SERIAL_BACKLOG:
                        break
                    status, inbox = self._scatter_take(name, node, j,
                                                       node.instance_eval_pos[j])
                    if status == "end":
                        stream.ended = True
                        self._cond.notify_all()
                        break
                    if status != "item":
                        break
                    node.instance_eval_pos[j] += 1
                    node.stats.items_in += 1
                env = self._evaluate_serial(name, node, inbox)
                self._append(node, stream, env)
                progressed = True
        return progressed

    def _evaluate_serial(self, name: str, node: _NodeRuntime, inbox) -> Envelope:
        t0 = time.monotonic()
        env = apply_chain(node.spec.chain, inbox, piper=name,
                          registry=self._run_registry)
        with self._cond:
            node.latencies.append((time.monotonic() - t0) * 1000.0)
        return env

    # -- inbox builders (hold self._cond) ----------------------------------------------

    def _promised(self, pred_name: str, index: int, instance: int | None = None) -> bool:
        """Is item `index` of this upstream already in flight somewhere?"""
        pred = self._nodes[pred_name]
        if pred.is_spawn and instance is not None:
            handle = (pred.instance_handles[instance]
                      if pred.instance_handles else None)
            stream = pred.instance_streams[instance]
        else:
            handle = pred.handle
            stream = pred.stream
        if handle is not None:
            return index < handle._dispatched
        return index < stream.appended

    def _root_take(self, node: _NodeRuntime):
        k = node.eval_pos
        if k >= len(node.inputs):
            return "end", None
        node.pulled += 1
        return "item", [payload(node.inputs[k], k)]

    def _join_take(self, name: str, node: _NodeRuntime, k: int):
        """Inbox for position k of a plain node: one envelope per incoming pipe."""
        inbox = []
        missing = []
        for pred in node.preds:
            stream = self._nodes[pred].stream
            if stream.appended > k:
                inbox.append(stream.envelopes[k])
            elif stream.ended:
                return "end", None
            else:
                missing.append(pred)
        if missing:
            if all(self._promised(p, k) for p in missing):
                return "pending", None
            return "empty", None
        for pred in node.preds:
            self._nodes[pred].stream.cursors[name] = k + 1
        self._cond.notify_all()
        return "item", inbox

    def _scatter_take(self, name: str, node: _NodeRuntime, j: int, p: int):
        """Sub-envelope j of parent p, derived from the produce piper's output."""
        producer = self._nodes[node.preds[0]]
        stream = producer.stream
        if stream.appended <= p:
            if stream.ended:
                return "end", None
            if self._promised(node.preds[0], p):
                return "pending", None
            return "empty", None
        parent = stream.envelopes[p]
        n = node.spec.spawn_n
        if parent.is_fault:
            sub = replace(parent, sub_index=j)
        elif not isinstance(parent.value, (list, tuple)) or len(parent.value) != n:
            fault = node.scatter_faults.get(p)
            if fault is None:
                got = (len(parent.value)
                       if isinstance(parent.value, (list, tuple)) else "a non-list")
                fault_env = new_fault(
                    producer.spec.name, -1, USER_ERROR,
                    f"produced {got} subitems, expected {n}",
                    parent.item_index, sub_index=j)
                fault = fault_env.fault
                node.scatter_faults[p] = fault
            sub = Envelope(item_index=parent.item_index, fault=fault, sub_index=j)
        else:
            sub = payload(parent.value[j], parent.item_index, sub_index=j)
        stream.cursors[f"{name}#{j}"] = p + 1
        self._cond.notify_all()
        return "item", [sub]

    def _gather_take(self, name: str, node: _NodeRuntime, p: int):
        """Single-slot inbox holding the ordered list of sub-results for parent p."""
        spawner = self._nodes[node.preds[0]]
        subs = []
        for j, stream in enumerate(spawner.instance_streams):
            if stream.appended > p:
                subs.append(stream.envelopes[p])
            elif stream.ended:
                return "end", None
            elif self._promised(node.preds[0], p, instance=j):
                return "pending", None
            else:
                return "empty", None
        for stream in spawner.instance_streams:
            stream.cursors[name] = p + 1
        self._cond.notify_all()
        parent_index = subs[0].item_index
        faulted = [j for j, sub in enumerate(subs) if sub.is_fault]
        if faulted and not node.spec.chain.handles_faults:
            first = subs[faulted[0]].fault
            gathered = FaultInfo(
                origin_piper=first.origin_piper,
                stage_index=first.stage_index,
                error_class=first.error_class,
                message=(f"{first.message} [gathered: sub(s) {faulted} of "
                         f"{len(subs)} faulted]"),
                hops=first.hops + 1,
            )
            return "item", [Envelope(item_index=parent_index, fault=gathered)]
        values = [sub.fault if sub.is_fault else sub.value for sub in subs]
        return "item", [payload(values, parent_index)]

    # -- statistics & accounting ---------------------------------------------------------

    def stats(self) -> RunStats:
        """Consistent snapshot of per-piper counters and latency quantiles."""
        snapshot = RunStats(started_at=self._started_at, ended_at=self._ended_at)
        logs = {ref: ex.dispatch_log() for ref, ex in self._executors.items()}
        with self._cond:
            for name, spec in self.pipers.items():
                node = self._nodes.get(name)
                if node is None:
                    snapshot.pipers[name] = PiperStats()
                    continue
                stats = replace(node.stats)
                latencies = list(node.latencies)
                if spec.executor_ref is not None and spec.executor_ref in logs:
                    seqs = {h.task_seq for h in
                            ([node.handle] if node.handle else []) + node.instance_handles}
                    for record in logs[spec.executor_ref]:
                        if record.task_seq in seqs and record.t_complete is not None:
                            latencies.append((record.t_complete - record.t_dispatch) * 1000.0)
                if latencies:
                    stats.wall_ms_total = sum(latencies)
                    stats.p50_ms = statistics.median(latencies)
                    stats.p95_ms = (statistics.quantiles(latencies, n=20)[18]
                                    if len(latencies) > 1 else latencies[0])
                snapshot.pipers[name] = stats
        return snapshot

    def accounting(self) -> dict:
        """Item conservation counts: delivered + parked + unread == total
        for linear topologies (exact partition once drained)."""
        with self._cond:
            delivered = sum(len(v) for v in self.results.values())
            parked = 0
            for node in self._nodes.values():
                streams = (node.instance_streams if node.is_spawn else [node.stream])
                for stream in streams:
                    if "__collector__" in stream.cursors:
                        continue
                    low = min(stream.cursors.values()) if stream.cursors else stream.appended
                    parked += stream.appended - low
            unread = 0
            total = 0
            for node in self._nodes.values():
                if node.inputs is not None:
                    total += len(node.inputs)
                    consumed = (node.pulled if node.spec.serial
                                else node.handle._dispatched if node.handle else 0)
                    unread += len(node.inputs) - consumed
            return {
                "delivered_at_leaves": delivered,
                "parked": parked,
                "unread_inputs": unread,
                "total_inputs": total,
            }


# --- task sources for parallel pipers (pulled by executor rotations) -----------

class _RootSource:
    def __init__(self, pipeline: Pipeline, name: str):
        self._p = pipeline
        self._name = name
        self._pos = 0

    def pull(self) -> Pull:
        p = self._p
        node = p._nodes[self._name]
        with p._cond:
            if not p._gate_open:
                return PULL_EMPTY
            if self._pos >= len(node.inputs):
                return PULL_END
            k = self._pos
            self._pos += 1
            node.pulled += 1
            node.stats.items_in += 1
            value = node.inputs[k]
        unit = WorkUnit(self._name, node.spec.chain, (payload(value, k),))
        return Pull(ITEM, k, unit)


class _TakeSource:
    """Base for sources that build inboxes from upstream streams."""

    kind_map = {"pending": PULL_PENDING, "empty": PULL_EMPTY, "end": PULL_END}

    def __init__(self, pipeline: Pipeline, name: str):
        self._p = pipeline
        self._name = name
        self._pos = 0

    def _take(self, node, k):  # pragma: no cover - overridden
        raise NotImplementedError

    def pull(self) -> Pull:
        p = self._p
        node = p._nodes[self._name]
        with p._cond:
            if not p._gate_open:
                return PULL_EMPTY
            status, inbox = self._take(node, self._pos)
            if status != "item":
                return self.kind_map[status]
            k = self._pos
            self._pos += 1
        unit = WorkUnit(self._name, node.spec.chain, tuple(inbox))
        return Pull(ITEM, k, unit)


class _JoinSource(_TakeSource):
    def _take(self, node, k):
        status, inbox = self._p._join_take(self._name, node, k)
        if status == "item":
            node.stats.items_in += 1
        return status, inbox


class _GatherSource(_TakeSource):
    def _take(self, node, k):
        status, inbox = self._p._gather_take(self._name, node, k)
        if status == "item":
            node.stats.items_in += 1
        return status, inbox


class _ScatterSource:
    def __init__(self, pipeline: Pipeline, name: str, instance: int):
        self._p = pipeline
        self._name = name
        self._j = instance
        self._pos = 0

    def pull(self) -> Pull:
        p = self._p
        node = p._nodes[self._name]
        with p._cond:
            if not p._gate_open:
                return PULL_EMPTY
            status, inbox = p._scatter_take(self._name, node, self._j, self._pos)
            if status != "item":
                return _TakeSource.kind_map[status]
            k = self._pos
            self._pos += 1
            node.stats.items_in += 1
        unit = WorkUnit(f"{self._name}", node.spec.chain, tuple(inbox))
        return Pull(ITEM, k, unit)
