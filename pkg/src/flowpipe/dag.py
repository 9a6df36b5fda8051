"""Directed-acyclic-graph container for pipeline topology.

Keeps node/edge bookkeeping with mutation-time cycle rejection and a
deterministic topological sort (Kahn's algorithm, ties broken by
ascending insertion sequence).  Incoming-edge insertion order is
preserved per node because it defines inbox slot order downstream.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable

from .errors import CycleRejected, DuplicateName, SelfLoop, UnknownEdge, UnknownNode


@dataclass(frozen=True)
class NodeId:
    """A node label plus its insertion sequence (never reused after removal)."""

    name: str
    seq: int


class Dag:
    """Mutable DAG; every mutation that would create a cycle is rejected atomically.

    Single-writer: mutate only before the pipeline starts.  Reads
    (topo_sort, predecessors, ...) are safe concurrently once frozen.
    """

    def __init__(self):
        self._nodes: dict[str, NodeId] = {}
        self._next_seq = 0
        self._succ: dict[str, list[str]] = {}   # outgoing, edge-insertion order
        self._pred: dict[str, list[str]] = {}   # incoming, edge-insertion order

    # -- helpers ------------------------------------------------------------

    def _name_of(self, node) -> str:
        name = node.name if isinstance(node, NodeId) else node
        if name not in self._nodes:
            raise UnknownNode(f"no node named {name!r}")
        return name

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node) -> bool:
        name = node.name if isinstance(node, NodeId) else node
        return name in self._nodes

    def nodes(self) -> list[NodeId]:
        return list(self._nodes.values())

    def node(self, name: str) -> NodeId:
        return self._nodes[self._name_of(name)]

    def edges(self) -> list[tuple[NodeId, NodeId]]:
        return [
            (self._nodes[u], self._nodes[v])
            for u in self._nodes
            for v in self._succ[u]
        ]

    def has_edge(self, frm, to) -> bool:
        u, v = self._name_of(frm), self._name_of(to)
        return v in self._succ[u]

    # -- mutation -------------------------------------------------------------

    def add_node(self, name: str) -> NodeId:
        if not name:
            raise ValueError("node name must be non-empty")
        if name in self._nodes:
            raise DuplicateName(f"node {name!r} already present")
        node = NodeId(name, self._next_seq)
        self._next_seq += 1
        self._nodes[name] = node
        self._succ[name] = []
        self._pred[name] = []
        return node

    def add_edge(self, frm, to) -> None:
        u, v = self._name_of(frm), self._name_of(to)
        if u == v:
            raise SelfLoop(f"edge {u!r} -> {u!r}")
        if v in self._succ[u]:
            raise DuplicateName(f"edge {u!r} -> {v!r} already present")
        # Atomic rejection: test reachability before touching the edge lists.
        if self._reaches(v, u):
            raise CycleRejected(f"edge {u!r} -> {v!r} would close a cycle")
        self._succ[u].append(v)
        self._pred[v].append(u)

    def remove_node(self, node) -> None:
        name = self._name_of(node)
        for v in self._succ.pop(name):
            self._pred[v].remove(name)
        for u in self._pred.pop(name):
            self._succ[u].remove(name)
        del self._nodes[name]

    def remove_edge(self, frm, to) -> None:
        u, v = self._name_of(frm), self._name_of(to)
        if v not in self._succ[u]:
            raise UnknownEdge(f"no edge {u!r} -> {v!r}")
        self._succ[u].remove(v)
        self._pred[v].remove(u)

    # -- queries ---------------------------------------------------------------

    def _reaches(self, start: str, goal: str) -> bool:
        stack = [start]
        seen = set()
        while stack:
            cur = stack.pop()
            if cur == goal:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self._succ[cur])
        return False

    def topo_sort(self) -> list[NodeId]:
        """Kahn's algorithm with a min-seq ready queue: deterministic output."""
        indegree = {name: len(self._pred[name]) for name in self._nodes}
        ready = [(node.seq, node.name) for node in self._nodes.values() if indegree[node.name] == 0]
        heapq.heapify(ready)
        order: list[NodeId] = []
        while ready:
            _, name = heapq.heappop(ready)
            order.append(self._nodes[name])
            for v in self._succ[name]:
                indegree[v] -= 1
                if indegree[v] == 0:
                    heapq.heappush(ready, (self._nodes[v].seq, v))
        # Acyclicity is a mutation-time invariant, so every node is emitted.
        assert len(order) == len(self._nodes)
        return order

    def roots(self) -> list[NodeId]:
        return [n for n in self._nodes.values() if not self._pred[n.name]]

    def leaves(self) -> list[NodeId]:
        return [n for n in self._nodes.values() if not self._succ[n.name]]

    def predecessors(self, node) -> list[NodeId]:
        """Incoming neighbours in edge-insertion order (downstream inbox slot order)."""
        return [self._nodes[u] for u in self._pred[self._name_of(node)]]

    def successors(self, node) -> list[NodeId]:
        return [self._nodes[v] for v in self._succ[self._name_of(node)]]

    def find_cycle(self) -> list[str] | None:
        """Whole-graph check for manifest loading; None on a healthy graph."""
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {name: WHITE for name in self._nodes}
        path: list[str] = []

        def visit(name: str) -> list[str] | None:
            color[name] = GRAY
            path.append(name)
            for v in self._succ[name]:
                if color[v] == GRAY:
                    return path[path.index(v):] + [v]
                if color[v] == WHITE:
                    cycle = visit(v)
                    if cycle is not None:
                        return cycle
            path.pop()
            color[name] = BLACK
            return None

        for name in self._nodes:
            if color[name] == WHITE:
                cycle = visit(name)
                if cycle is not None:
                    return cycle
        return None

    def copy(self) -> "Dag":
        dup = Dag()
        dup._nodes = dict(self._nodes)
        dup._next_seq = self._next_seq
        dup._succ = {k: list(v) for k, v in self._succ.items()}
        dup._pred = {k: list(v) for k, v in self._pred.items()}
        return dup
