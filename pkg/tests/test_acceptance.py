"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
complete; without -s pytest shows them for failing criteria only.
"""

import hashlib
import json
import os
import random
import re
import subprocess
import sys
import threading
import time
from contextlib import contextmanager

import pytest

from flowpipe import envelope as env_mod
from flowpipe import log
from flowpipe.codec import BIN_V1, TEXT_V1, get_codec
from flowpipe.dag import Dag
from flowpipe.errors import (
    AlreadyRedeemed,
    CycleRejected,
    DuplicateName,
    IllegalState,
    SelfLoop,
    TransportError,
    UnknownEdge,
    UnknownNode,
)
from flowpipe.executor import (
    END_OF_STREAM,
    ChainedSource,
    Executor,
    ExecutorConfig,
    IterableSource,
    TaskHandle,
)
from flowpipe.ipc import StagingState, dump_item, load_item
from flowpipe.pipeline import Pipeline, PiperSpec, RunState
from flowpipe.worker import WorkerRegistry, compose_chain

from oracles import (
    brute_force_has_cycle,
    per_task_order,
    reference_dispatch_schedule,
    serial_reference,
    violates_edge_precedence,
)


@contextmanager
def criterion(number, title):
    try:
        yield
    except BaseException:
        print(f"[criterion {number:02d}] FAIL — {title}")
        raise
    print(f"[criterion {number:02d}] PASS — {title}")


def drain(ex, handle, out):
    while True:
        r = ex.next_result(handle)
        if r is END_OF_STREAM:
            return
        out.append(r)


# --- 1. stride-scheduler equivalence -----------------------------------------

def test_criterion_01_stride_scheduler_equivalence():
    with criterion(1, "stride scheduler matches reference on 200 random configs"):
        rng = random.Random(1234)
        registry = WorkerRegistry()
        registry.register("bump", lambda inbox: inbox[0] + 1)
        t_start = time.monotonic()
        for trial in range(200):
            n_tasks = rng.randint(1, 4)
            stride = rng.choice([1, 2, 4, 8])
            lanes = rng.randint(1, 8)
            n_items = rng.randint(1, 64)
            ex = Executor(ExecutorConfig(lanes_inproc=lanes, stride=stride), registry)
            chain = compose_chain(["bump"], registry)
            handles = [ex.attach_task(TaskHandle(
                IterableSource(range(n_items), chain, "t0"), name="t0"))]
            for k in range(1, n_tasks):
                handles.append(ex.attach_task(TaskHandle(
                    ChainedSource(ex, handles[-1], chain, f"t{k}"), name=f"t{k}")))
            results = []
            consumer = threading.Thread(target=drain, args=(ex, handles[-1], results))
            consumer.start()
            ex.start()
            consumer.join(timeout=30)
            assert not consumer.is_alive(), f"trial {trial} hung"
            got = per_task_order(
                [(r.task_seq, r.item_index) for r in ex.dispatch_log()])
            want = per_task_order(
                reference_dispatch_schedule(n_items, n_tasks, stride, lanes))
            assert got == want, f"trial {trial}: {got} != {want}"
            in_flight = [0] * n_tasks
            for kind, seq in ex.flow_events():
                in_flight[seq] += 1 if kind == "dispatch" else -1
                assert in_flight[seq] <= stride + lanes, f"trial {trial}: bound broken"
            assert len(results) == n_items
            ex.stop()
        elapsed = time.monotonic() - t_start
        assert elapsed < 60.0, f"took {elapsed:.1f}s, budget is 60s"


# --- 2. serial equivalence -----------------------------------------------------

_OPS = {
    "double": lambda x: x * 2,
    "inc": lambda x: x + 1,
    "neg": lambda x: -x,
    "sqmod": lambda x: (x * x) % 997,
    "strlen": lambda x: len(f"<{x}>"),
}


def _random_pipeline(rng, registry):
    n_nodes = rng.randint(1, 8)
    names = [f"n{i}" for i in range(n_nodes)]
    edges = []
    for j in range(1, n_nodes):
        for i in range(j):
            if rng.random() < 0.35:
                edges.append((names[i], names[j]))
    preds = {n: [u for u, v in edges if v == n] for n in names}
    succs = {n: [v for u, v in edges if u == n] for n in names}

    chains = {}
    for n in names:
        tail = [rng.choice(list(_OPS)) for _ in range(rng.randint(0, 2))]
        chains[n] = ["combine"] + tail

    p = Pipeline(registry=registry)
    p.add_executor("pool", ExecutorConfig(
        lanes_inproc=rng.randint(1, 4), stride=rng.choice([1, 2, 4])))
    all_ordered = True
    for n in names:
        serial = rng.random() < 0.4
        unordered_ok = (not serial and succs[n]
                        and all(len(preds[s]) == 1 for s in succs[n]))
        unordered = unordered_ok and rng.random() < 0.2
        if unordered:
            all_ordered = False
        p.add_piper(PiperSpec(n, compose_chain(chains[n], registry),
                              executor_ref=None if serial else "pool",
                              ordered=not unordered))
    for u, v in edges:
        p.add_pipe(u, v)

    n_items = rng.randint(5, 20)
    roots = [r.name for r in p.dag.roots()]
    inputs = {r: [rng.randint(-50, 50) for _ in range(n_items)] for r in roots}
    oracle_fns = {
        n: [lambda inbox: sum(inbox)] + [
            (lambda op: lambda inbox: _OPS[op](inbox[0]))(op)
            for op in chains[n][1:]]
        for n in names
    }
    return p, edges, inputs, oracle_fns, all_ordered


def test_criterion_02_serial_equivalence():
    with criterion(2, "100 random pipelines match the single-context oracle"):
        registry = WorkerRegistry()
        registry.register("combine", lambda inbox: sum(inbox))
        for op, fn in _OPS.items():
            registry.register(op, (lambda f: lambda inbox: f(inbox[0]))(fn))
        rng = random.Random(99)
        checked_order = 0
        for trial in range(100):
            p, edges, inputs, oracle_fns, all_ordered = _random_pipeline(rng, registry)
            report = p.validate()
            assert report.ok, (trial, report.violations)
            roots = [r.name for r in p.dag.roots()]
            p.start([inputs[r] for r in roots])
            p.run()
            p.wait()
            oracle = serial_reference(oracle_fns, edges, inputs)
            for leaf in p.results:
                got = [e.value for e in p.results[leaf]]
                assert not any(e.is_fault for e in p.results[leaf])
                if all_ordered:
                    assert got == oracle[leaf], f"trial {trial} leaf {leaf}"
                    checked_order += 1
                else:
                    assert sorted(map(repr, got)) == sorted(map(repr, oracle[leaf]))
        assert checked_order > 20  # plenty of ordered runs verified exactly


# --- 3. fault isolation and propagation ------------------------------------------

def test_criterion_03_fault_isolation():
    with criterion(3, "poisoned item 37: one fault, hops=2, others byte-identical"):
        calls = {"mid": 0, "leaf": 0}

        def make_registry(poisoned):
            reg = WorkerRegistry()
            if poisoned:
                reg.register("head", lambda inbox: 1 / (inbox[0] - 37) and inbox[0])
            else:
                reg.register("head", lambda inbox: inbox[0])
            reg.register("mid", lambda inbox: (calls.__setitem__("mid", calls["mid"] + 1),
                                               inbox[0] + 1)[1])
            reg.register("leaf", lambda inbox: (calls.__setitem__("leaf", calls["leaf"] + 1),
                                                inbox[0] * 3)[1])
            return reg

        def run(poisoned):
            reg = make_registry(poisoned)
            p = Pipeline(registry=reg)
            p.add_executor("pool", ExecutorConfig(lanes_inproc=3, stride=2))
            p.add_piper(PiperSpec("head", compose_chain(["head"], reg),
                                  executor_ref="pool"))
            p.add_piper(PiperSpec("mid", compose_chain(["mid"], reg),
                                  executor_ref="pool"))
            p.add_piper(PiperSpec("leaf", compose_chain(["leaf"], reg)))
            p.add_pipe("head", "mid")
            p.add_pipe("mid", "leaf")
            assert p.validate().ok
            p.start([range(100)])
            p.run()
            p.wait()
            return p.results["leaf"]

        calls.update(mid=0, leaf=0)
        clean = run(poisoned=False)
        assert calls == {"mid": 100, "leaf": 100}

        calls.update(mid=0, leaf=0)
        poisoned = run(poisoned=True)
        faults = [e for e in poisoned if e.is_fault]
        assert len(faults) == 1
        assert faults[0].item_index == 37
        assert faults[0].fault.origin_piper == "head"
        assert faults[0].fault.hops == 2
        # zero user-function invocations on fault inboxes
        assert calls == {"mid": 99, "leaf": 99}
        for i in range(100):
            if i == 37:
                continue
            assert repr(poisoned[i].value).encode() == repr(clean[i].value).encode()


# --- 4. no lost results on pause/stop ----------------------------------------------

def _pause_stop_pipeline(reg):
    p = Pipeline(registry=reg)
    p.add_executor("pool", ExecutorConfig(lanes_inproc=2, stride=2))
    p.add_piper(PiperSpec("a", compose_chain(["nap"], reg), executor_ref="pool"))
    p.add_piper(PiperSpec("b", compose_chain(["nap"], reg), executor_ref="pool"))
    p.add_piper(PiperSpec("c", compose_chain(["nap"], reg)))
    p.add_pipe("a", "b")
    p.add_pipe("b", "c")
    assert p.validate().ok
    return p


def test_criterion_04_no_lost_results():
    with criterion(4, "pause/stop conserves all 1000 items across 50 trials"):
        rng = random.Random(4)
        reg = WorkerRegistry()
        reg.register("nap", lambda inbox: (time.sleep(0.0002), inbox[0])[1])
        for trial in range(50):
            p = _pause_stop_pipeline(reg)
            p.start([range(1000)])
            p.run()
            time.sleep(rng.uniform(0.0, 0.08))
            p.pause()
            p.stop()
            acc = p.accounting()
            total = (acc["delivered_at_leaves"] + acc["parked"]
                     + acc["unread_inputs"])
            assert total == 1000, (trial, acc)

        uninterrupted = None
        for trial in range(8):
            p = _pause_stop_pipeline(reg)
            p.start([range(1000)])
            p.run()
            time.sleep(rng.uniform(0.0, 0.06))
            p.pause()
            time.sleep(0.01)
            p.run()  # resume from parked
            p.wait()
            got = sorted(e.value for e in p.results["c"])
            if uninterrupted is None:
                uninterrupted = sorted(range(1000))
            assert got == uninterrupted, trial


# --- 5. speedup sanity ------------------------------------------------------------

def test_criterion_05_speedup():
    with criterion(5, "8 lanes beat 1 lane by >= 5x on a 20 ms sleep worker"):
        t_begin = time.monotonic()
        reg = WorkerRegistry()
        reg.register("doze", lambda inbox: (time.sleep(0.020), inbox[0])[1])

        def timed_run(lanes):
            ex = Executor(ExecutorConfig(lanes_inproc=lanes, stride=8), reg)
            chain = compose_chain(["doze"], reg)
            handle = ex.attach_task(TaskHandle(
                IterableSource(range(64), chain, "t0"), name="t0"))
            results = []
            consumer = threading.Thread(target=drain, args=(ex, handle, results))
            consumer.start()
            t0 = time.monotonic()
            ex.start()
            consumer.join(timeout=60)
            wall = time.monotonic() - t0
            assert len(results) == 64
            ex.stop()
            return wall

        wall_8 = timed_run(8)
        wall_1 = timed_run(1)
        ratio = wall_1 / wall_8
        assert ratio >= 5.0, f"speedup only {ratio:.2f}x ({wall_1:.3f}s vs {wall_8:.3f}s)"
        assert wall_8 <= 1.5 * (64 / 8) * 0.020 + 0.25  # wall-time sanity per lane count
        assert time.monotonic() - t_begin < 10.0


# --- 6. scatter / gather --------------------------------------------------------------

def test_criterion_06_scatter_gather():
    with criterion(6, "produce/spawn/consume(4) matches map-reduce; sub-fault collapses"):
        reg = WorkerRegistry()
        reg.register("split4", lambda inbox: [inbox[0] * 4 + j for j in range(4)])
        reg.register("square", lambda inbox: inbox[0] ** 2)
        reg.register("total", lambda inbox: sum(inbox[0]))

        def build(worker="square"):
            p = Pipeline(registry=reg)
            p.add_executor("pool", ExecutorConfig(lanes_inproc=4, stride=2))
            p.add_piper(PiperSpec("prod", compose_chain(["split4"], reg),
                                  executor_ref="pool", produce_n=4))
            p.add_piper(PiperSpec("work", compose_chain([worker], reg),
                                  executor_ref="pool", spawn_n=4))
            p.add_piper(PiperSpec("gath", compose_chain(["total"], reg),
                                  consume_n=4))
            p.add_pipe("prod", "work")
            p.add_pipe("work", "gath")
            assert p.validate().ok
            return p

        p = build()
        p.start([range(50)])
        p.run()
        p.wait()
        got = [e.value for e in p.results["gath"]]
        want = [sum(_map_reduce(i)) for i in range(50)]
        assert got == want

        reg.register("square_poison", lambda inbox: 1 / (inbox[0] - 22) and inbox[0] ** 2)
        p = build("square_poison")  # sub 22 = parent 5, sub 2
        p.start([range(50)])
        p.run()
        p.wait()
        envs = p.results["gath"]
        faults = [e for e in envs if e.is_fault]
        assert len(faults) == 1 and faults[0].item_index == 5
        others = [e.value for e in envs if not e.is_fault]
        assert others == [sum(_map_reduce(i)) for i in range(50) if i != 5]


def _map_reduce(i):
    return [(i * 4 + j) ** 2 for j in range(4)]


# --- 7. IPC manager bypass --------------------------------------------------------------

def test_criterion_07_ipc_manager_bypass(tmp_path):
    with criterion(7, "10 MiB direct transfer per method; in-band stays <= 1 KiB"):
        blob = os.urandom(10 * 1024 * 1024)
        digest = hashlib.sha256(blob).digest()
        for method in ("socket", "pipe", "file"):
            staging = StagingState(root=tmp_path / method)
            locator = dump_item(blob, method=method, codec=BIN_V1, staging=staging)
            from flowpipe.ipc import locator_to_wire

            in_band_env = env_mod.payload(locator_to_wire(locator), 0)
            in_band_bytes = get_codec(TEXT_V1).encode(env_mod.to_wire(in_band_env))
            assert len(in_band_bytes) <= 1024, (method, len(in_band_bytes))
            out = load_item(locator, staging=staging)
            assert hashlib.sha256(out).digest() == digest, method

        staging = StagingState(root=tmp_path / "conc")
        locator = dump_item(blob[: 1024 * 1024], method="file",
                            codec=BIN_V1, staging=staging)
        outcomes = []
        lock = threading.Lock()

        def attempt():
            try:
                value = load_item(locator, staging=staging, timeout_s=10)
                with lock:
                    outcomes.append(("ok", hashlib.sha256(value).digest()))
            except (AlreadyRedeemed, TransportError) as exc:
                with lock:
                    outcomes.append(("err", type(exc).__name__))

        threads = [threading.Thread(target=attempt) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert len(outcomes) == 8
        assert sum(1 for kind, _ in outcomes if kind == "ok") == 1


# --- 8. remote end-to-end (CLI) -------------------------------------------------------------

def _spawn_server(slots):
    proc = subprocess.Popen(
        [sys.executable, "-m", "flowpipe", "serve", "--port", "0",
         "--slots", str(slots)],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
    line = proc.stdout.readline().strip()
    assert line.startswith("LISTENING "), line
    return proc, int(line.split()[1])


def _cli_run(manifest_path, *extra):
    proc = subprocess.run(
        [sys.executable, "-m", "flowpipe", "run", str(manifest_path),
         "--log-level=ERROR", *extra],
        capture_output=True, text=True, timeout=180)
    return proc


def test_criterion_08_remote_end_to_end(tmp_path):
    with criterion(8, "two worker servers via CLI --workers; tcp run matches"):
        srv_a, port_a = _spawn_server(2)
        srv_b, port_b = _spawn_server(4)
        workers = f"--workers=127.0.0.1:{port_a}#2,127.0.0.1:{port_b}#4"
        try:
            where_doc = {
                "executors": {"pool": {"inproc": 0, "outproc": 0,
                                       "remote": [], "stride": 1}},
                "pipers": {
                    "where": {"chain": [{"fn": "where"}], "executor": "pool"},
                    "print": {"chain": [{"fn": "io.print"}]},
                },
                "pipes": [["where", "print"]],
                "inputs": {"where": list(range(100))},
            }
            where_manifest = tmp_path / "where.json"
            where_manifest.write_text(json.dumps(where_doc))
            proc = _cli_run(where_manifest, workers)
            assert proc.returncode == 0, proc.stderr
            lines = [l for l in proc.stdout.splitlines() if l.startswith("input: ")]
            assert len(lines) == 100
            pids = {m.group(1) for l in lines
                    for m in [re.search(r"process:(\d+)", l)] if m}
            assert len(pids) >= 2, pids

            relay_doc = dict(where_doc)
            relay_doc = json.loads(json.dumps(where_doc))
            relay_doc["pipers"]["where"]["chain"] = [{"fn": "identity"}]
            relay_manifest = tmp_path / "relay.json"
            relay_manifest.write_text(json.dumps(relay_doc))

            plain = _cli_run(relay_manifest, workers)
            tcp = _cli_run(relay_manifest, workers, "--use_tcp=true")
            assert plain.returncode == 0, plain.stderr
            assert tcp.returncode == 0, tcp.stderr

            def leaf_payloads(proc):
                return [l for l in proc.stdout.splitlines()
                        if re.fullmatch(r"\d+", l)]

            assert leaf_payloads(plain) == leaf_payloads(tcp)
            assert len(leaf_payloads(plain)) == 100
        finally:
            for proc in (srv_a, srv_b):
                proc.kill()
                proc.wait()


# --- 9. lifecycle state machine ----------------------------------------------------------------

def _fresh(reg):
    p = Pipeline(registry=reg)
    p.add_executor("pool", ExecutorConfig(lanes_inproc=2))
    p.add_piper(PiperSpec("only", compose_chain(["nap"], reg), executor_ref="pool"))
    return p


def _drive_to(reg, state):
    p = _fresh(reg)
    if state == "Created":
        return p
    p.validate()
    if state == "Validated":
        return p
    p.start([range(30)])
    if state == "Bound":
        return p
    p.run()
    if state == "Running":
        return p
    if state == "Paused":
        p.pause()
        return p
    if state == "Finished":
        p.wait()
        return p
    p.pause()
    p.stop()
    return p  # Stopped


def test_criterion_09_state_machine():
    with criterion(9, "every (state, operation) pair matches the transition table"):
        reg = WorkerRegistry()
        reg.register("nap", lambda inbox: (time.sleep(0.001), inbox[0])[1])
        legal = {
            ("Created", "validate"), ("Validated", "start"), ("Bound", "run"),
            ("Running", "wait"), ("Running", "pause"),
            ("Paused", "run"), ("Paused", "stop"),
        }
        states = ["Created", "Validated", "Bound", "Running", "Paused",
                  "Finished", "Stopped"]
        ops = ["validate", "start", "run", "wait", "pause", "stop"]
        for state in states:
            for op in ops:
                p = _drive_to(reg, state)
                call = {
                    "validate": lambda: p.validate(),
                    "start": lambda: p.start([range(4)]),
                    "run": lambda: p.run(),
                    "wait": lambda: p.wait(),
                    "pause": lambda: p.pause(),
                    "stop": lambda: p.stop(),
                }[op]
                if (state, op) in legal:
                    call()
                else:
                    with pytest.raises(IllegalState):
                        call()  # includes Running -> stop: cannot stop a running pipeline
                if p.state is RunState.RUNNING:
                    p.wait()
                elif p.state is RunState.PAUSED:
                    p.stop()


# --- 10. DAG properties ---------------------------------------------------------------------------

def test_criterion_10_dag_properties():
    with criterion(10, "1000 random mutation sequences stay acyclic and sorted"):
        rng = random.Random(10)
        for trial in range(1000):
            n = rng.randint(1, 10)
            dag = Dag()
            for i in range(n):
                dag.add_node(f"n{i}")
            for _ in range(rng.randint(0, 25)):
                op = rng.choice(["add_edge", "add_edge", "remove_edge", "remove_node",
                                 "add_node"])
                try:
                    if op == "add_node":
                        dag.add_node(f"x{rng.randrange(10_000)}")
                    else:
                        names = [node.name for node in dag.nodes()]
                        if len(names) < 2:
                            continue
                        u, v = rng.sample(names, 2)
                        if op == "add_edge":
                            dag.add_edge(u, v)
                        elif op == "remove_edge":
                            dag.remove_edge(u, v)
                        else:
                            dag.remove_node(u)
                except (CycleRejected, SelfLoop, DuplicateName,
                        UnknownNode, UnknownEdge):
                    continue
            names = [node.name for node in dag.nodes()]
            edges = [(a.name, b.name) for a, b in dag.edges()]
            assert not brute_force_has_cycle(names, edges), trial
            order = [node.name for node in dag.topo_sort()]
            assert sorted(order) == sorted(names)
            assert not violates_edge_precedence(order, edges)
            assert order == [node.name for node in dag.topo_sort()]  # deterministic
