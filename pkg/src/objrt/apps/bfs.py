"""Distributed breadth-first search over a partitioned graph.

The graph is split into contiguous vertex ranges, one part object per
partition. Each search round, every part buckets its frontier edges
into per-part edge lists and sends them to their owners (every part
invokes every part, inside a barrier); the round ends with the
all-pairs empty-frontier poll that decides termination. Parent links
are set at most once, first arrival wins, so the tree shape can vary
between schedules while the level of every vertex is deterministic and
is what gets checked against the sequential oracle.
"""

from __future__ import annotations

import threading
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..api import barrier_scope, create_host, remote_construct, remote_invoke
from ..runtime import KindDescriptor, KindRegistry, issue_invoke

PART_KIND = 102

M_SET_PEERS = 1
M_SEED_ROOT = 2
M_SORT_FRONTIER = 3
M_DISTRIBUTE = 4
M_SET_PARENTS = 5
M_IS_EMPTY_FRONTIER = 6
M_CHECK_ALL_EMPTY = 7
M_RESULTS = 8


@dataclass
class EdgeList:
    """Frontier edges bound for one part: (parent, child) pairs."""

    edges: list[tuple[int, int]] = field(default_factory=list)


class GraphPart:
    """One partition: its vertex range, adjacency, parents, and frontier.

    Registered concurrency-safe: parts invoke each other (including
    themselves) while their own methods are in flight, so part-local
    state is guarded by an internal lock instead of the per-object
    serialization default.
    """

    def __init__(self, part_id: int, n_parts: int, bounds: list[int],
                 adjacency: list[list[int]]):
        self.part_id = part_id
        self.n_parts = n_parts
        self.bounds = list(bounds)
        self.lo = bounds[part_id]
        self.hi = bounds[part_id + 1]
        if len(adjacency) != self.hi - self.lo:
            raise ValueError("adjacency does not cover the owned vertex range")
        self.adjacency = adjacency
        self.peers: list | None = None
        self._lock = threading.Lock()
        self._reset()

    def _reset(self):
        n_local = self.hi - self.lo
        self.parents = [-1] * n_local
        self.levels = [-1] * n_local
        self.round = -1
        self.frontier: list[int] = []
        self.incoming: list[int] = []
        self.outboxes: list[EdgeList] | None = None

    def owner(self, v: int) -> int:
        return bisect_right(self.bounds, v) - 1

    def set_peers(self, refs) -> None:
        self.peers = refs

    def seed_root(self, root: int) -> None:
        self._reset()
        if self.lo <= root < self.hi:
            self.parents[root - self.lo] = root
            self.levels[root - self.lo] = 0
            self.incoming = [root]

    def sort_frontier(self) -> int:
        """Take the accumulated frontier and bucket its edges per owner."""
        with self._lock:
            self.round += 1
            self.frontier = self.incoming
            self.incoming = []
        out = [EdgeList() for _ in range(self.n_parts)]
        for u in self.frontier:
            for v in self.adjacency[u - self.lo]:
                out[self.owner(v)].edges.append((u, v))
        self.outboxes = out
        return len(self.frontier)

    def distribute(self) -> None:
        """Send this part's edge lists to every part, in parallel."""
        boxes = self.outboxes
        peers = self.peers
        barrier_scope(lambda: [
            issue_invoke(peers[j], M_SET_PARENTS, [boxes[j]])
            for j in range(self.n_parts)
        ])

    def set_parents(self, edge_list: EdgeList) -> int:
        added = 0
        with self._lock:
            level = self.round + 1
            for u, v in edge_list.edges:
                i = v - self.lo
                if self.parents[i] < 0:
                    self.parents[i] = u
                    self.levels[i] = level
                    self.incoming.append(v)
                    added += 1
        return added

    def is_empty_frontier(self) -> bool:
        with self._lock:
            return not self.incoming

    def check_all_empty(self) -> bool:
        finished = True
        for j in range(self.n_parts):
            empty = issue_invoke(self.peers[j], M_IS_EMPTY_FRONTIER, []).wait()
            finished = empty and finished
        return finished

    def results(self) -> tuple[int, int, list[int], list[int]]:
        return self.lo, self.hi, list(self.parents), list(self.levels)


def register_kinds(registry: KindRegistry) -> None:
    registry.register(KindDescriptor(
        kind_id=PART_KIND, name="graph-part", construct=GraphPart,
        concurrency_safe=True,
        methods={
            M_SET_PEERS: GraphPart.set_peers,
            M_SEED_ROOT: GraphPart.seed_root,
            M_SORT_FRONTIER: GraphPart.sort_frontier,
            M_DISTRIBUTE: GraphPart.distribute,
            M_SET_PARENTS: GraphPart.set_parents,
            M_IS_EMPTY_FRONTIER: GraphPart.is_empty_frontier,
            M_CHECK_ALL_EMPTY: GraphPart.check_all_empty,
            M_RESULTS: GraphPart.results,
        }))


# --- graph construction and the sequential oracle -----------------------------


def generate_graph(n_vertices: int, mean_degree: float, seed: int) -> list[list[int]]:
    """Seeded random graph with the requested mean degree (undirected)."""
    n_edges = int(n_vertices * mean_degree / 2)
    rng = np.random.default_rng(seed)
    seen = set()
    adjacency: list[list[int]] = [[] for _ in range(n_vertices)]
    while len(seen) < n_edges:
        need = n_edges - len(seen)
        us = rng.integers(0, n_vertices, size=need * 2)
        vs = rng.integers(0, n_vertices, size=need * 2)
        for u, v in zip(us.tolist(), vs.tolist()):
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key in seen:
                continue
            seen.add(key)
            adjacency[u].append(v)
            adjacency[v].append(u)
            if len(seen) == n_edges:
                break
    return adjacency


def partition_bounds(n_vertices: int, n_parts: int) -> list[int]:
    base, extra = divmod(n_vertices, n_parts)
    bounds = [0]
    for i in range(n_parts):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    return bounds


def sequential_bfs(adjacency: list[list[int]], root: int) -> list[int]:
    """Single-threaded oracle: level of every vertex, -1 if unreachable."""
    levels = [-1] * len(adjacency)
    levels[root] = 0
    todo = deque([root])
    while todo:
        u = todo.popleft()
        for v in adjacency[u]:
            if levels[v] < 0:
                levels[v] = levels[u] + 1
                todo.append(v)
    return levels


# --- driver -------------------------------------------------------------------


def build_parts(adjacency: list[list[int]], n_parts: int) -> list:
    """Construct one part per partition on its own host; returns refs."""
    bounds = partition_bounds(len(adjacency), n_parts)
    hosts = [create_host(f"part{i}") for i in range(n_parts)]
    futures = []
    for i in range(n_parts):
        local = adjacency[bounds[i]:bounds[i + 1]]
        futures.append(remote_construct(
            hosts[i], PART_KIND, [i, n_parts, bounds, local]))
    refs = [f.wait() for f in futures]
    barrier_scope(lambda: [remote_invoke(r, M_SET_PEERS, [refs]) for r in refs])
    return refs


def graph_build_tree(part_refs: list, root: int) -> int:
    """Run the search to completion; returns the iteration count.

    Each iteration: every part sorts its frontier edges, then every
    part sends edge lists to every part inside a barrier, then the
    all-pairs empty-frontier poll folds into the finished flag the next
    iteration causally depends on.
    """
    barrier_scope(lambda: [remote_invoke(r, M_SEED_ROOT, [root]) for r in part_refs])
    iterations = 0
    while True:
        iterations += 1
        barrier_scope(lambda: [remote_invoke(r, M_SORT_FRONTIER) for r in part_refs])
        barrier_scope(lambda: [remote_invoke(r, M_DISTRIBUTE) for r in part_refs])
        checks = [remote_invoke(r, M_CHECK_ALL_EMPTY) for r in part_refs]
        finished = True
        for f in checks:
            finished = f.wait() and finished
        if finished:
            return iterations


def gather_results(part_refs: list, n_vertices: int) -> tuple[list[int], list[int]]:
    parents = [-1] * n_vertices
    levels = [-1] * n_vertices
    for f in [remote_invoke(r, M_RESULTS) for r in part_refs]:
        lo, hi, p, l = f.wait()
        parents[lo:hi] = p
        levels[lo:hi] = l
    return parents, levels


# --- validation ----------------------------------------------------------------


def bfs_validate(adjacency: list[list[int]], root: int, parents: list[int],
                 levels: list[int], oracle_levels: list[int]) -> dict:
    """Graph500-style checks; every violated check is itemized."""
    adj_sets = [set(nbrs) for nbrs in adjacency]
    failures: dict[str, list[str]] = {
        "root_is_own_parent": [],
        "tree_edges_exist": [],
        "levels_consistent": [],
        "reachability_matches": [],
    }
    if parents[root] != root:
        failures["root_is_own_parent"].append(
            f"root {root} has parent {parents[root]}")
    for v, p in enumerate(parents):
        if p < 0 or v == root:
            continue
        if v not in adj_sets[p]:
            failures["tree_edges_exist"].append(f"edge ({p}, {v}) not in graph")
        elif levels[v] != levels[p] + 1:
            failures["levels_consistent"].append(
                f"vertex {v}: level {levels[v]} != parent level {levels[p]} + 1")
    for v in range(len(adjacency)):
        reachable = oracle_levels[v] >= 0
        has_parent = parents[v] >= 0
        if reachable != has_parent:
            failures["reachability_matches"].append(
                f"vertex {v}: reachable={reachable} but parent={parents[v]}")
    failures = {k: v for k, v in failures.items() if v}
    return {
        "passed": not failures,
        "failures": failures,
        "levels_match_oracle": levels == oracle_levels,
    }


def demo(cluster, n_vertices: int, mean_degree: float, n_parts: int, seed: int,
         root: int = 0) -> dict:
    adjacency = generate_graph(n_vertices, mean_degree, seed)
    oracle = sequential_bfs(adjacency, root)

    def main():
        refs = build_parts(adjacency, n_parts)
        iterations = graph_build_tree(refs, root)
        parents, levels = gather_results(refs, n_vertices)
        return iterations, parents, levels

    iterations, parents, levels = cluster.run(main)
    report = bfs_validate(adjacency, root, parents, levels, oracle)
    report.update({
        "app": "bfs",
        "vertices": n_vertices,
        "parts": n_parts,
        "iterations": iterations,
        "reached": sum(1 for l in levels if l >= 0),
    })
    report["passed"] = report["passed"] and report["levels_match_oracle"]
    return report
