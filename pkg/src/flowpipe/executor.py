"""The shared lane pool: evaluates multiple attached node-streams ("tasks")
over in-process, out-of-process, and remote lanes, interleaving tasks in
stride-sized rounds.

Scheduling law (the stride contract): tasks are cycled in task_seq order,
and in each rotation round up to `stride` items of task k are dispatched
before any item of task k+1.  A task source distinguishes three idle
states so the rotation can be both deterministic and live:

  PENDING -- the next item is already in flight upstream and will arrive
             with no further dispatching; the rotation waits for it.
  EMPTY   -- nothing is in flight; only future rounds (or outside events)
             can produce the item; the task yields its turn.
  END     -- the source is exhausted for good.

Dispatch-counting semantics: the rotation advances on dispatches, not
completions.  A task may not hold more than stride + total_lanes items
in flight (dispatched but not yet delivered to its consumer); the gate
yields the turn rather than blocking, which preserves liveness when the
consumer is the one who must make room.

Lanes are work-stealing: any free lane takes the next dispatched item.
Out-of-process lanes are loopback worker servers speaking the same framed
protocol as remote lanes.
"""

from __future__ import annotations

import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

from . import log
from .envelope import TIMEOUT, Envelope, new_fault, payload
from .errors import (
    AlreadyStarted,
    ExecutorStopped,
    NoTasks,
    RemoteUnreachable,
    Unreachable,
    ZeroLanes,
)
from .remote import RemoteSlotPool, connect
from .worker import WorkerChain, WorkerRegistry, apply_chain, default_registry

# Pull kinds returned by task sources.
ITEM = "item"
PENDING = "pending"
EMPTY = "empty"
END = "end"


class Pull(NamedTuple):
    kind: str
    item_index: int = -1
    unit: Optional["WorkUnit"] = None


PULL_PENDING = Pull(PENDING)
PULL_EMPTY = Pull(EMPTY)
PULL_END = Pull(END)


class _EndOfStream:
    def __repr__(self):
        return "END_OF_STREAM"


END_OF_STREAM = _EndOfStream()


@dataclass(frozen=True)
class WorkUnit:
    """One evaluation: a registry-named chain applied to an inbox.

    Work units carry FunctionRef chains, never closures, so the same unit
    can run on any lane kind.
    """

    piper: str
    chain: WorkerChain
    inbox: tuple[Envelope, ...]


@dataclass
class ExecutorConfig:
    """Lane mix and scheduling granularity for one shared pool.

    remote entries are (host, port, slots) triples.  registry_imports
    names modules that out-of-process lanes import at startup so the
    same worker names resolve there.
    """

    lanes_inproc: int = 0
    lanes_outproc: int = 0
    remote: Sequence[tuple[str, int, int]] = ()
    stride: int = 1
    name: str = "pool"
    registry_imports: Sequence[str] = ()

    @property
    def total_lanes(self) -> int:
        return self.lanes_inproc + self.lanes_outproc + sum(s for _, _, s in self.remote)

    def validate(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.lanes_inproc < 0 or self.lanes_outproc < 0:
            raise ValueError("lane counts cannot be negative")
        if any(slots < 1 for _, _, slots in self.remote):
            raise ValueError("remote slots must be >= 1")
        if self.total_lanes < 1:
            raise ZeroLanes(f"executor {self.name!r} has no lanes")


@dataclass
class DispatchRecord:
    """Instrumentation: one dispatched item, finalized at completion."""

    task_seq: int
    item_index: int
    lane_id: Optional[int] = None
    t_dispatch: float = 0.0
    t_complete: Optional[float] = None
    outcome: Optional[str] = None  # ok | fault | timeout


class TaskHandle:
    """One piper's evaluation stream as registered with a shared executor."""

    def __init__(self, source, ordered: bool = True,
                 timeout_ms: Optional[int] = None, name: str = "task"):
        if timeout_ms is not None and timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        self.source = source
        self.ordered = ordered
        self.timeout_ms = timeout_ms
        self.name = name
        self.task_seq: int = -1
        self.on_progress: Optional[Callable[[], None]] = None
        # guarded by the owning executor's condition
        self._dispatched = 0
        self._completed = 0
        self._delivered = 0
        self._source_ended = False
        self._ordered_buf: dict[int, Envelope] = {}
        self._ready: deque[tuple[int, Envelope]] = deque()
        self._next_delivery = 0


class _Token:
    """A dispatched item moving through the lanes."""

    __slots__ = ("task", "index", "unit", "record", "deadline", "state")

    def __init__(self, task: TaskHandle, index: int, unit: WorkUnit,
                 record: DispatchRecord):
        self.task = task
        self.index = index          # dense per-task position
        self.unit = unit
        self.record = record
        self.deadline: Optional[float] = None
        self.state = "queued"       # queued | executing | done | abandoned


# --- lanes -----------------------------------------------------------------------

class _InprocLane:
    kind = "inproc"

    def __init__(self, registry: WorkerRegistry):
        self._registry = registry

    def execute(self, unit: WorkUnit) -> Envelope:
        return apply_chain(unit.chain, list(unit.inbox), piper=unit.piper,
                           registry=self._registry)

    def reclaim(self) -> None:
        # Threads cannot be killed safely; the late result is discarded on arrival.
        pass

    def close(self) -> None:
        pass


class _RemoteLane:
    kind = "remote"

    def __init__(self, pool: RemoteSlotPool):
        self._pool = pool

    def execute(self, unit: WorkUnit) -> Envelope:
        return self._pool.call(unit.chain, list(unit.inbox), piper=unit.piper)

    def reclaim(self) -> None:
        # The slot stays occupied until the server answers; the late result
        # is discarded on arrival so the advertised-slots bound holds.
        pass

    def close(self) -> None:
        pass


class _OutprocLane:
    """A dedicated single-slot worker server subprocess on loopback."""

    kind = "outproc"

    def __init__(self, registry_imports: Sequence[str], name: str):
        self._imports = tuple(registry_imports)
        self._name = name
        self._proc: subprocess.Popen | None = None
        self._pool: RemoteSlotPool | None = None
        self._spawn()

    def _spawn(self) -> None:
        cmd = [sys.executable, "-m", "flowpipe", "serve", "--port", "0", "--slots", "1"]
        for mod in self._imports:
            cmd += ["--registry", mod]
        self._proc = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                      stderr=subprocess.DEVNULL, text=True)
        line = self._proc.stdout.readline().strip()
        if not line.startswith("LISTENING "):
            raise RemoteUnreachable(f"local worker server for {self._name} failed to start")
        port = int(line.split()[1])
        self._pool = connect("127.0.0.1", port, client_name=self._name)

    def execute(self, unit: WorkUnit) -> Envelope:
        if self._pool is None or self._pool._dead is not None:
            try:
                self.close()
                self._spawn()
            except (RemoteUnreachable, Unreachable, OSError, ValueError) as exc:
                return new_fault(unit.piper, -1, "remote_error",
                                 f"local lane respawn failed: {exc}",
                                 unit.inbox[0].item_index, unit.inbox[0].sub_index)
        return self._pool.call(unit.chain, list(unit.inbox), piper=unit.piper)

    def reclaim(self) -> None:
        # Terminate the hung server; the lane respawns it before its next item.
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool = None
        if self._proc is not None:
            if self._proc.poll() is None:
                self._proc.kill()
            self._proc.stdout.close()
            self._proc.wait()
            self._proc = None


# --- the executor -------------------------------------------------------------------

class Executor:
    """Shared pool evaluating attached tasks with stride interleaving.

    attach/start/stop belong to one control context; next_result may be
    called by one consumer per task.
    """

    def __init__(self, config: ExecutorConfig,
                 registry: WorkerRegistry | None = None):
        config.validate()
        self.config = config
        self._registry = registry or default_registry()
        self._cond = threading.Condition()
        self._tasks: list[TaskHandle] = []
        self._queue: deque[_Token] = deque()
        self._executing: set[_Token] = set()
        self._log: list[DispatchRecord] = []
        self._deliveries: list[tuple[int, int, float]] = []
        self._flow_events: list[tuple[str, int]] = []
        self._started = False
        self._stop_requested = False
        self._stopped = False
        self._lanes_shutdown = False
        self._threads: list[threading.Thread] = []
        self._next_seq = 0

        # Provision lanes now; remote reachability is a create-time error.
        self._lanes: list = []
        self._pools: list[RemoteSlotPool] = []
        for _ in range(config.lanes_inproc):
            self._lanes.append(_InprocLane(self._registry))
        for _ in range(config.lanes_outproc):
            self._lanes.append(_OutprocLane(config.registry_imports, config.name))
        for host, port, slots in config.remote:
            try:
                pool = connect(host, port, client_name=config.name)
            except Unreachable as exc:
                self._close_lanes()
                raise RemoteUnreachable(str(exc)) from exc
            if pool.slots < slots:
                log.info(config.name,
                         f"{host}:{port} advertises {pool.slots} slots, "
                         f"using that instead of {slots}")
                slots = pool.slots
            self._pools.append(pool)
            for _ in range(slots):
                self._lanes.append(_RemoteLane(pool))

    # -- registration / lifecycle ---------------------------------------------

    @property
    def total_lanes(self) -> int:
        return len(self._lanes)

    def attach_task(self, handle: TaskHandle) -> TaskHandle:
        with self._cond:
            if self._started:
                raise AlreadyStarted("cannot attach tasks after start")
            handle.task_seq = self._next_seq
            self._next_seq += 1
            self._tasks.append(handle)
        return handle

    def start(self) -> None:
        with self._cond:
            if self._started:
                return  # idempotent
            if not self._tasks:
                raise NoTasks("attach at least one task before start")
            self._started = True
        for lane_id, lane in enumerate(self._lanes):
            t = threading.Thread(target=self._lane_loop, args=(lane_id, lane),
                                 name=f"{self.config.name}-lane{lane_id}", daemon=True)
            t.start()
            self._threads.append(t)
        sched = threading.Thread(target=self._scheduler_loop,
                                 name=f"{self.config.name}-sched", daemon=True)
        sched.start()
        self._threads.append(sched)
        if any(t.timeout_ms is not None for t in self._tasks):
            wd = threading.Thread(target=self._watchdog_loop,
                                  name=f"{self.config.name}-watchdog", daemon=True)
            wd.start()
            self._threads.append(wd)

    def stop(self, drain: bool = True) -> None:
        """Graceful stop: no new dispatches, every in-flight item completes
        and becomes deliverable before this returns."""
        if not drain:
            raise ValueError("only draining stop is offered; the engine never "
                             "abandons dispatched work")
        with self._cond:
            if self._stopped:
                return
            self._started = True  # stop before start still shuts lanes down
            self._stop_requested = True
            self._cond.notify_all()
            while self._queue or any(tok.state == "executing" for tok in self._executing):
                self._cond.wait(timeout=0.05)
            self._lanes_shutdown = True
            self._cond.notify_all()
        for t in self._threads:
            t.join(timeout=2.0)
        self._close_lanes()
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        self._fire_progress()

    def _close_lanes(self) -> None:
        for lane in self._lanes:
            try:
                lane.close()
            except OSError:
                pass
        for pool in self._pools:
            pool.close()

    def kick(self) -> None:
        """Wake the rotation after an external source-state change."""
        with self._cond:
            self._cond.notify_all()

    # -- introspection -------------------------------------------------------------

    def dispatch_log(self) -> list[DispatchRecord]:
        with self._cond:
            return [replace(r) for r in self._log]

    def delivery_log(self) -> list[tuple[int, int, float]]:
        """(task_seq, per-task index, t_deliver) for every next_result delivery."""
        with self._cond:
            return list(self._deliveries)

    def flow_events(self) -> list[tuple[str, int]]:
        """("dispatch"|"deliver", task_seq) in exact lock order, for replaying
        the per-task in-flight bound."""
        with self._cond:
            return list(self._flow_events)

    def in_flight(self, handle: TaskHandle) -> int:
        with self._cond:
            return handle._dispatched - handle._delivered

    # -- delivery --------------------------------------------------------------------

    def _pop_ready(self, handle: TaskHandle):
        if handle.ordered:
            env = handle._ordered_buf.pop(handle._next_delivery, None)
            if env is not None:
                idx = handle._next_delivery
                handle._next_delivery += 1
                return idx, env
            return None
        if handle._ready:
            return handle._ready.popleft()
        return None

    def _deliver(self, handle: TaskHandle, idx: int, env: Envelope) -> Envelope:
        handle._delivered += 1
        self._deliveries.append((handle.task_seq, idx, time.monotonic()))
        self._flow_events.append(("deliver", handle.task_seq))
        self._cond.notify_all()
        return env

    def next_result(self, handle: TaskHandle):
        """Next envelope for this task; END_OF_STREAM after exhaustion.

        Ordered tasks block until the next index is complete; unordered
        tasks deliver in completion order.
        """
        with self._cond:
            while True:
                popped = self._pop_ready(handle)
                if popped is not None:
                    return self._deliver(handle, *popped)
                if handle._source_ended and handle._delivered == handle._dispatched:
                    return END_OF_STREAM
                if self._stopped:
                    raise ExecutorStopped(
                        f"executor {self.config.name!r} stopped before task "
                        f"{handle.name!r} finished")
                self._cond.wait()

    def try_next(self, handle: TaskHandle):
        """Non-blocking next_result: None when nothing is deliverable yet."""
        with self._cond:
            popped = self._pop_ready(handle)
            if popped is not None:
                return self._deliver(handle, *popped)
            if handle._source_ended and handle._delivered == handle._dispatched:
                return END_OF_STREAM
            if self._stopped:
                return END_OF_STREAM
            return None

    # -- scheduling ----------------------------------------------------------------

    def _scheduler_loop(self) -> None:
        while True:
            progressed = False
            for task in self._tasks:
                if self._visit(task):
                    progressed = True
                with self._cond:
                    if self._stop_requested:
                        return
            with self._cond:
                if self._stop_requested:
                    return
                if all(t._source_ended for t in self._tasks):
                    return
                if not progressed:
                    self._cond.wait(timeout=0.05)

    def _visit(self, task: TaskHandle) -> bool:
        """Dispatch up to `stride` items of one task; True if any dispatched."""
        stride = self.config.stride
        bound = stride + self.total_lanes
        dispatched_any = False
        n = 0
        while n < stride:
            with self._cond:
                if self._stop_requested or task._source_ended:
                    return dispatched_any
                if task._dispatched - task._delivered >= bound:
                    return dispatched_any  # memory bound: yield the turn
            pull = task.source.pull()
            if pull.kind == ITEM:
                self._dispatch(task, pull.item_index, pull.unit)
                dispatched_any = True
                n += 1
            elif pull.kind == END:
                with self._cond:
                    task._source_ended = True
                    self._cond.notify_all()
                self._fire_progress(task)
                return dispatched_any
            elif pull.kind == EMPTY:
                return dispatched_any
            elif pull.kind == PENDING:
                # The item is in flight and owes us nothing; wait, then retry.
                with self._cond:
                    if self._stop_requested:
                        return dispatched_any
                    self._cond.wait(timeout=0.05)
            else:
                raise ValueError(f"source returned unknown pull kind {pull.kind!r}")
        return dispatched_any

    def _dispatch(self, task: TaskHandle, item_index: int, unit: WorkUnit) -> None:
        with self._cond:
            if item_index != task._dispatched:
                raise ValueError(
                    f"task {task.name!r} source must yield dense indexes: "
                    f"expected {task._dispatched}, got {item_index}")
            record = DispatchRecord(task_seq=task.task_seq, item_index=item_index,
                                    t_dispatch=time.monotonic())
            self._log.append(record)
            self._flow_events.append(("dispatch", task.task_seq))
            task._dispatched += 1
            self._queue.append(_Token(task, item_index, unit, record))
            self._cond.notify_all()

    # -- lanes ------------------------------------------------------------------------

    def _lane_loop(self, lane_id: int, lane) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._lanes_shutdown:
                    self._cond.wait()
                if not self._queue and self._lanes_shutdown:
                    return
                token = self._queue.popleft()
                token.state = "executing"
                self._executing.add(token)
                token.record.lane_id = lane_id
                if token.task.timeout_ms is not None:
                    token.deadline = time.monotonic() + token.task.timeout_ms / 1000.0
            env = lane.execute(token.unit)
            with self._cond:
                self._executing.discard(token)
                if token.state == "abandoned":
                    # timed out while running: the genuine result is discarded
                    self._cond.notify_all()
                    continue
                token.state = "done"
                self._complete(token, env)
                self._cond.notify_all()
            self._fire_progress(token.task)

    def _complete(self, token: _Token, env: Envelope) -> None:
        token.record.t_complete = time.monotonic()
        token.record.outcome = "fault" if env.is_fault else "ok"
        task = token.task
        task._completed += 1
        if task.ordered:
            task._ordered_buf[token.index] = env
        else:
            task._ready.append((token.index, env))

    # -- timeouts ----------------------------------------------------------------------

    def _watchdog_loop(self) -> None:
        while True:
            overdue: list[_Token] = []
            with self._cond:
                if self._lanes_shutdown and not self._executing:
                    return
                now = time.monotonic()
                for token in self._executing:
                    if (token.state == "executing" and token.deadline is not None
                            and now > token.deadline):
                        token.state = "abandoned"
                        overdue.append(token)
            for token in overdue:
                unit = token.unit
                fault = new_fault(unit.piper, -1, TIMEOUT,
                                  f"item exceeded {token.task.timeout_ms} ms",
                                  unit.inbox[0].item_index, unit.inbox[0].sub_index)
                with self._cond:
                    token.record.t_complete = time.monotonic()
                    token.record.outcome = "timeout"
                    task = token.task
                    task._completed += 1
                    if task.ordered:
                        task._ordered_buf[token.index] = fault
                    else:
                        task._ready.append((token.index, fault))
                    self._executing.discard(token)
                    lane_id = token.record.lane_id
                    self._cond.notify_all()
                self._lanes[lane_id].reclaim()
                self._fire_progress(token.task)
            time.sleep(0.002)

    def _fire_progress(self, task: TaskHandle | None = None) -> None:
        tasks = [task] if task is not None else self._tasks
        for t in tasks:
            cb = t.on_progress
            if cb is not None:
                cb()


def create_executor(config: ExecutorConfig,
                    registry: WorkerRegistry | None = None) -> Executor:
    return Executor(config, registry)


# --- reusable sources ------------------------------------------------------------

class IterableSource:
    """Feeds a task from a finite collection of values.

    Each value v becomes WorkUnit(piper, chain, [payload(v, i)]).  An
    optional gate callable makes the source report EMPTY while closed.
    """

    def __init__(self, values: Iterable, chain: WorkerChain, piper: str = "task",
                 gate: Callable[[], bool] | None = None):
        self._values = list(values)
        self._chain = chain
        self._piper = piper
        self._gate = gate
        self._pos = 0

    def pull(self) -> Pull:
        if self._gate is not None and not self._gate():
            return PULL_EMPTY
        if self._pos >= len(self._values):
            return PULL_END
        idx = self._pos
        self._pos += 1
        unit = WorkUnit(self._piper, self._chain, (payload(self._values[idx], idx),))
        return Pull(ITEM, idx, unit)


class ChainedSource:
    """Feeds a task from another task's results on the same executor.

    Pulling acts as the upstream's consumer, so delivery accounting (and
    with it the stride memory bound) flows through the chain.
    """

    def __init__(self, executor: Executor, upstream: TaskHandle,
                 chain: WorkerChain, piper: str = "task"):
        self._executor = executor
        self._upstream = upstream
        self._chain = chain
        self._piper = piper
        self._pos = 0

    def pull(self) -> Pull:
        result = self._executor.try_next(self._upstream)
        if result is END_OF_STREAM:
            return PULL_END
        if result is None:
            if self._executor.in_flight(self._upstream) > 0:
                return PULL_PENDING
            return PULL_EMPTY
        idx = self._pos
        self._pos += 1
        return Pull(ITEM, idx, WorkUnit(self._piper, self._chain, (result,)))
