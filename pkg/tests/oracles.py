"""Independent reference implementations the engine is checked against.

Nothing here imports engine internals beyond plain data: the cycle
checker works on explicit edge lists, and the reference scheduler
simulates the published rotation law directly.
"""

from __future__ import annotations


def brute_force_has_cycle(nodes, edges) -> bool:
    """Exhaustive DFS cycle search over an explicit edge list."""
    adjacency = {n: [] for n in nodes}
    for u, v in edges:
        adjacency[u].append(v)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}

    def visit(n) -> bool:
        color[n] = GRAY
        for m in adjacency[n]:
            if color[m] == GRAY:
                return True
            if color[m] == WHITE and visit(m):
                return True
        color[n] = BLACK
        return False

    return any(color[n] == WHITE and visit(n) for n in nodes)


def violates_edge_precedence(order, edges) -> bool:
    """True if any edge (u, v) has u at or after v in the given order."""
    position = {n: i for i, n in enumerate(order)}
    return any(position[u] >= position[v] for u, v in edges)


def reference_dispatch_schedule(n_items: int, n_tasks: int, stride: int,
                                lanes: int) -> list[tuple[int, int]]:
    """Simulate the stride rotation for a linear chain of ordered tasks.

    Dispatch-counting semantics: the rotation advances after dispatching
    up to `stride` items of task k, regardless of completions.  Task k's
    source is task k-1's output stream; an item that is merely in flight
    counts as obtainable because the rotation waits for it rather than
    yielding.  A task may not exceed stride + lanes items in flight,
    where "delivered" means consumed by the next task (the end consumer
    drains eagerly).  Returns the global dispatch order as
    (task, item_index) pairs.
    """
    dispatched = [0] * n_tasks
    done = [False] * n_tasks
    order: list[tuple[int, int]] = []
    bound = stride + lanes

    def available(k: int) -> int:
        if k == 0:
            return n_items - dispatched[0]
        return dispatched[k - 1] - dispatched[k]

    def delivered_to_consumer(k: int) -> int:
        if k == n_tasks - 1:
            return dispatched[k]  # eager end consumer
        return dispatched[k + 1]

    while not all(done):
        for k in range(n_tasks):
            if done[k]:
                continue
            dispatched_this_visit = 0
            while dispatched_this_visit < stride:
                if dispatched[k] - delivered_to_consumer(k) >= bound:
                    break  # memory bound: yield the turn
                if available(k) <= 0:
                    upstream_done = (k == 0) or done[k - 1]
                    if upstream_done:
                        done[k] = True
                    break  # source empty (or exhausted): yield
                order.append((k, dispatched[k]))
                dispatched[k] += 1
                dispatched_this_visit += 1
            if k == 0 and dispatched[0] == n_items:
                done[0] = True
            if k > 0 and done[k - 1] and dispatched[k] == dispatched[k - 1]:
                done[k] = True
    return order


def per_task_order(schedule) -> dict[int, list[int]]:
    result: dict[int, list[int]] = {}
    for task, idx in schedule:
        result.setdefault(task, []).append(idx)
    return result


def serial_reference(workers_by_node, edges, roots_inputs):
    """Single-context pipeline oracle: evaluate chains item-by-item over a DAG.

    workers_by_node maps name -> list of plain functions (inbox -> value);
    stage 0 sees [pred values...] in edge order (or [input] at a root),
    later stages see [previous].  Returns name -> list of output values.
    """
    names = list(workers_by_node)
    preds = {n: [] for n in names}
    for u, v in edges:
        preds[v].append(u)
    order = []
    while len(order) < len(names):
        for n in names:
            if n not in order and all(p in order for p in preds[n]):
                order.append(n)
    outputs = {}
    n_items = min(len(v) for v in roots_inputs.values()) if roots_inputs else 0
    for name in order:
        outputs[name] = []
        for k in range(n_items):
            if not preds[name]:
                inbox = [roots_inputs[name][k]]
            else:
                inbox = [outputs[p][k] for p in preds[name]]
            value = inbox
            for j, fn in enumerate(workers_by_node[name]):
                value = fn(value if j == 0 else [value])
            outputs[name].append(value)
    return outputs
