"""Watershed graph: station nodes, river-distance edges and diffusion transitions.

Edges point downstream (from upstream station to downstream station). Edge
weights are ``exp(-d)`` where ``d`` is the min-max standardized river distance,
so closer stations get weights nearer to 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DuplicateEdgeError, InvalidGraphError


def build_proximity(edges, n_nodes: int) -> np.ndarray:
    """Proximity matrix ``A`` with ``A[i, j] = exp(-d_ij)`` on edges ``i -> j``.

    Distances are min-max standardized over the edge set. When every edge has
    the same length the standardized distance is 0 for all of them.
    """
    if n_nodes < 1:
        raise InvalidGraphError("graph has no nodes")
    A = np.zeros((n_nodes, n_nodes))
    if not edges:
        return A
    seen = set()
    for u, v, dist in edges:
        if not (0 <= u < n_nodes and 0 <= v < n_nodes):
            raise InvalidGraphError(f"edge ({u}, {v}) has an endpoint outside 0..{n_nodes - 1}")
        if u == v:
            raise InvalidGraphError(f"self-edge on node {u}")
        if not dist > 0:
            raise InvalidGraphError(f"edge ({u}, {v}) has non-positive distance {dist}")
        if (u, v) in seen:
            raise DuplicateEdgeError(f"duplicate edge ({u}, {v})")
        seen.add((u, v))
    d = np.array([e[2] for e in edges], dtype=float)
    span = d.max() - d.min()
    scaled = (d - d.min()) / span if span > 0 else np.zeros_like(d)
    for (u, v, _), s in zip(edges, scaled):
        A[u, v] = np.exp(-s)
    return A


def _check_acyclic(n_nodes, edges):
    indeg = [0] * n_nodes
    children = [[] for _ in range(n_nodes)]
    for u, v, _ in edges:
        children[u].append(v)
        indeg[v] += 1
    stack = [i for i in range(n_nodes) if indeg[i] == 0]
    visited = 0
    while stack:
        i = stack.pop()
        visited += 1
        for j in children[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    if visited != n_nodes:
        raise InvalidGraphError("river network contains a cycle")


@dataclass
class WatershedGraph:
    node_ids: list
    edges: list
    target_index: int
    proximity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.node_ids = [str(n) for n in self.node_ids]
        self.edges = [(int(u), int(v), float(d)) for u, v, d in self.edges]
        if len(set(self.node_ids)) != len(self.node_ids):
            raise InvalidGraphError("duplicate node id")
        if not 0 <= self.target_index < max(len(self.node_ids), 1):
            raise InvalidGraphError("target node index out of range")
        self.proximity = build_proximity(self.edges, len(self.node_ids))
        _check_acyclic(self.n_nodes, self.edges)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def target_id(self) -> str:
        return self.node_ids[self.target_index]

    def index(self, node_id) -> int:
        return self.node_ids.index(str(node_id))

    def permuted(self, order) -> "WatershedGraph":
        """Relabel nodes so that new node ``k`` is old node ``order[k]``."""
        inv = {old: new for new, old in enumerate(order)}
        return WatershedGraph(
            node_ids=[self.node_ids[i] for i in order],
            edges=[(inv[u], inv[v], d) for u, v, d in self.edges],
            target_index=inv[self.target_index],
        )

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n, "is_target": i == self.target_index} for i, n in enumerate(self.node_ids)],
            "edges": [
                {"from": self.node_ids[u], "to": self.node_ids[v], "distance_km": d} for u, v, d in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "WatershedGraph":
        nodes = payload.get("nodes") or []
        if not nodes:
            raise InvalidGraphError("graph has no nodes")
        ids = [str(n["id"]) for n in nodes]
        targets = [i for i, n in enumerate(nodes) if n.get("is_target")]
        if len(targets) != 1:
            raise InvalidGraphError(f"expected exactly one target node, found {len(targets)}")
        lookup = {n: i for i, n in enumerate(ids)}
        edges = []
        for e in payload.get("edges", []):
            try:
                edges.append((lookup[str(e["from"])], lookup[str(e["to"])], float(e["distance_km"])))
            except KeyError as exc:
                raise InvalidGraphError(f"edge references unknown node {exc}") from None
        return cls(ids, edges, targets[0])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "WatershedGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TransitionSet:
    transition: np.ndarray
    powers: np.ndarray  # (K, N, N); powers[k] = transition ** k
    K: int


def transition_matrix(A: np.ndarray) -> np.ndarray:
    """In-degree random-walk matrix ``D_I^-1 A^T``; headwater rows stay zero."""
    indeg = A.sum(axis=0)
    P = np.zeros_like(A)
    has_inflow = indeg > 0
    P[has_inflow] = A.T[has_inflow] / indeg[has_inflow, None]
    return P


def build_transitions(graph: WatershedGraph, K: int = 2) -> TransitionSet:
    if K < 1:
        raise ContractError(f"diffusion steps K must be >= 1, got {K}")
    P = transition_matrix(graph.proximity)
    n = graph.n_nodes
    powers = np.empty((K, n, n))
    powers[0] = np.eye(n)
    for k in range(1, K):
        powers[k] = powers[k - 1] @ P
    return TransitionSet(P, powers, K)
