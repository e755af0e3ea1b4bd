"""Directed graphs with discrete gradient and divergence operators.

Vertex values (potentials) live on vertices, fluxes live on oriented edges.
The incidence matrix ``D0`` (one row per edge: -1 at the source, +1 at the
target) is the matrix form of the edge-wise gradient; its transpose is the
divergence used everywhere as the conservation operator.  The divergence sign
convention is fixed to ``D0.T @ F`` (incoming minus outgoing); conservation
``D0.T @ F == 0`` does not depend on the choice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

OBSERVED = "observed"
UNOBSERVED = "unobserved"


@dataclass(frozen=True, eq=False)
class DirectedGraph:
    """Validated directed graph over dense vertex ids ``0..V-1``.

    ``vertex_observed`` / ``edge_observed`` are boolean masks partitioning
    vertices and edges into observed (boundary) and unobserved (interior)
    sets.  Instances are built through :func:`build_graph`, never mutated.
    """

    edges: tuple[tuple[int, int], ...]
    num_vertices: int
    vertex_observed: np.ndarray
    edge_observed: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def sources(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=int)

    @property
    def targets(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=int)

    @property
    def observed_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.vertex_observed)

    @property
    def unobserved_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.vertex_observed)

    @property
    def observed_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_observed)

    @property
    def unobserved_edges(self) -> np.ndarray:
        return np.flatnonzero(~self.edge_observed)

    @property
    def num_observed_vertices(self) -> int:
        return int(self.vertex_observed.sum())

    @property
    def num_unobserved_vertices(self) -> int:
        return self.num_vertices - self.num_observed_vertices

    @property
    def num_observed_edges(self) -> int:
        return int(self.edge_observed.sum())

    @property
    def num_unobserved_edges(self) -> int:
        return self.num_edges - self.num_observed_edges

    def topology_payload(self) -> dict:
        """JSON-ready topology block (edges plus partition id lists)."""
        return {
            "num_vertices": self.num_vertices,
            "edges": [[int(a), int(b)] for a, b in self.edges],
            "observed_vertices": [int(v) for v in self.observed_vertices],
            "observed_edges": [int(e) for e in self.observed_edges],
        }


def build_graph(
    edge_list: Sequence[tuple[int, int]],
    vertex_observed: Sequence[bool],
    edge_observed: Sequence[bool],
) -> DirectedGraph:
    """Validate and freeze a directed graph.

    Edges keep their input order, vertices their id order.  Raises
    :class:`ValidationError` naming the offending element for self-loops,
    dangling endpoints, partition size mismatches, and disconnected graphs.
    """
    if len(edge_list) == 0:
        raise ValidationError("edge list is empty")
    num_vertices = len(vertex_observed)
    if num_vertices == 0:
        raise ValidationError("vertex partition flags are empty")
    if len(edge_observed) != len(edge_list):
        raise ValidationError(
            f"partition size mismatch: {len(edge_list)} edges but "
            f"{len(edge_observed)} edge flags"
        )

    edges = []
    for idx, (a, b) in enumerate(edge_list):
        a, b = int(a), int(b)
        if not (0 <= a < num_vertices):
            raise ValidationError(
                f"edge {idx} references vertex {a} of a {num_vertices}-vertex graph"
            )
        if not (0 <= b < num_vertices):
            raise ValidationError(
                f"edge {idx} references vertex {b} of a {num_vertices}-vertex graph"
            )
        if a == b:
            raise ValidationError(f"self-loop at vertex {a}")
        edges.append((a, b))

    _check_connected(edges, num_vertices)

    v_obs = np.asarray(vertex_observed, dtype=bool).copy()
    e_obs = np.asarray(edge_observed, dtype=bool).copy()
    v_obs.setflags(write=False)
    e_obs.setflags(write=False)
    return DirectedGraph(
        edges=tuple(edges),
        num_vertices=num_vertices,
        vertex_observed=v_obs,
        edge_observed=e_obs,
    )


def _check_connected(edges: list[tuple[int, int]], num_vertices: int) -> None:
    # Undirected BFS from vertex 0; a split graph decouples the conservation
    # system, so it is rejected at load time.
    adjacency: list[list[int]] = [[] for _ in range(num_vertices)]
    for a, b in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen = np.zeros(num_vertices, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for w in adjacency[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ValidationError(
            f"graph disconnected: vertex {missing} is unreachable from vertex 0"
        )


def incidence_matrix(g: DirectedGraph) -> np.ndarray:
    """Dense E x V incidence matrix: -1 at each edge's source, +1 at its target."""
    d0 = np.zeros((g.num_edges, g.num_vertices))
    for e, (a, b) in enumerate(g.edges):
        d0[e, a] = -1.0
        d0[e, b] = 1.0
    return d0


def graph_gradient(g: DirectedGraph, u: np.ndarray) -> np.ndarray:
    """Edge-wise gradient ``D0 @ u``; entry for edge (a, b) is ``u[b] - u[a]``.

    ``u`` may be a V-vector or a V x N matrix of stacked columns.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[0] != g.num_vertices:
        raise ValidationError(
            f"vertex field has length {u.shape[0]}, expected {g.num_vertices}"
        )
    return u[g.targets] - u[g.sources]


def graph_divergence(g: DirectedGraph, flux: np.ndarray) -> np.ndarray:
    """Vertex-wise divergence ``D0.T @ F`` (incoming minus outgoing).

    ``flux`` may be an E-vector or an E x N matrix of stacked columns.
    """
    flux = np.asarray(flux, dtype=float)
    if flux.shape[0] != g.num_edges:
        raise ValidationError(
            f"edge field has length {flux.shape[0]}, expected {g.num_edges}"
        )
    out = np.zeros((g.num_vertices,) + flux.shape[1:])
    np.add.at(out, g.targets, flux)
    np.subtract.at(out, g.sources, flux)
    return out
