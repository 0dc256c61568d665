"""Contact scene graph, BFS orientation into a DAG, and contact sources."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from .geometry import Sim3, sdf_query, sim3_apply, sim3_inverse
from .sensing import Plane


@dataclass(frozen=True)
class SceneGraph:
    """Undirected graph over nodes 0..N; node 0 is the environment."""

    node_count: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        clean = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ValueError(f"edge ({u}, {v}) out of range for {self.node_count} nodes")
            clean.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(clean))

    def neighbors(self, u: int) -> list[int]:
        return sorted({b if a == u else a for a, b in self.edges if u in (a, b)})


@dataclass(frozen=True)
class DagOrder:
    parents: dict[int, frozenset[int]]
    order: tuple[int, ...]

    def edges(self) -> list[tuple[int, int]]:
        return sorted((p, c) for c, ps in self.parents.items() for p in ps)


def approximate_dag(g: SceneGraph) -> DagOrder:
    """BFS from node 0 with ascending neighbors; edges point from earlier to later discovery."""
    rank = {0: 0}
    order = [0]
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if v not in rank:
                rank[v] = len(order)
                order.append(v)
                queue.append(v)
    reachable = set(order)
    for v in range(1, g.node_count):
        if v not in rank:
            rank[v] = len(order)
            order.append(v)
    parents: dict[int, set[int]] = {v: set() for v in range(g.node_count)}
    for a, b in g.edges:
        if a in rank and b in rank:
            lo, hi = (a, b) if rank[a] < rank[b] else (b, a)
            parents[hi].add(lo)
    for v in range(1, g.node_count):
        if v not in reachable:
            parents[v].add(0)
    return DagOrder({k: frozenset(v) for k, v in parents.items()}, tuple(order))


def load_contacts(path: str | Path, node_count: int | None = None) -> SceneGraph:
    """Parse ``u v`` lines (``#`` comments allowed)."""
    edges = []
    max_node = 0
    for lineno, raw in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'u v', got {raw.strip()!r}") from None
        if u < 0 or v < 0:
            raise ValueError(f"{path}:{lineno}: negative node id in {raw.strip()!r}")
        if u == v:
            raise ValueError(f"{path}:{lineno}: self-loop {raw.strip()!r}")
        if node_count is not None and max(u, v) >= node_count:
            raise ValueError(f"{path}:{lineno}: node out of range in {raw.strip()!r}")
        edges.append((u, v))
        max_node = max(max_node, u, v)
    n = node_count if node_count is not None else max_node + 1
    return SceneGraph(n, frozenset(edges))


def save_contacts(g: SceneGraph, path: str | Path) -> None:
    lines = ["# contact edges, one 'u v' per line; node 0 is the environment"]
    lines += [f"{u} {v}" for u, v in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def infer_contacts_geometric(bodies: dict, poses: dict[int, Sim3], plane: Plane,
                             contact_tol: float = 0.005) -> SceneGraph:
    """Distance-threshold contact oracle for trusted (e.g. ground-truth) poses.

    ``bodies[i]`` is a ``BodyModel`` and ``poses[i]`` its camera-to-object pose.  The gap
    between two bodies is the smallest SDF value of one over the other's surface samples,
    so touching faces register even when the two sample sets do not line up.
    """
    ids = sorted(bodies)
    world = {i: sim3_apply(sim3_inverse(poses[i]), bodies[i].samples) for i in ids}
    edges = set()
    for i in ids:
        if np.min(plane.signed_distance(world[i])) <= contact_tol:
            edges.add((0, i))
    for a_pos, i in enumerate(ids):
        for j in ids[a_pos + 1:]:
            gap_ij = np.min(sdf_query(bodies[j].sdf, sim3_apply(poses[j], world[i]))) / poses[j].scale
            gap_ji = np.min(sdf_query(bodies[i].sdf, sim3_apply(poses[i], world[j]))) / poses[i].scale
            if min(gap_ij, gap_ji) <= contact_tol:
                edges.add((i, j))
    return SceneGraph(max(ids, default=0) + 1, frozenset(edges))
