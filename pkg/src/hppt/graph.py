"""Directed-graph propagation kernels.

A parsing tree is re-rooted at a chosen leaf and every edge is oriented
outward, weighted by decay^(distance of its far end). The weighted adjacency
feeds a teleport-smoothed row-stochastic transition matrix, whose stationary
left eigenvector symmetrizes the propagation operator applied to node
features. Everything is dense float64; graphs stay tiny at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegeneracyError, NotFoundError, RangeError
from .tree import ParsingTree


@dataclass
class OrientedGraph:
    """Decay-weighted adjacency of a tree oriented away from ``root``.

    ``vertex_order`` fixes matrix indexing (ascending node ids);
    ``adjacency[i, j]`` is decay^d(v_j) when (v_i, v_j) is a tree edge with
    v_i closer to the root, else 0.
    """

    vertex_order: list[int]
    adjacency: np.ndarray
    root: int
    decay: float
    distances: dict[int, int]


@dataclass
class TransitionMatrix:
    matrix: np.ndarray
    teleport: float


@dataclass
class StationaryDist:
    pi: np.ndarray
    residual: float


def bfs_distances(node_ids: list[int], edges: set[tuple[int, int]], source: int) -> dict[int, int]:
    """Breadth-first edge distances from ``source`` over an undirected edge set."""
    adj: dict[int, list[int]] = {n: [] for n in node_ids}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    dist = {source: 0}
    frontier = [source]
    while frontier:
        nxt = []
        for node in frontier:
            for nb in adj[node]:
                if nb not in dist:
                    dist[nb] = dist[node] + 1
                    nxt.append(nb)
        frontier = nxt
    return dist


def orient_edges(
    node_ids: list[int],
    edges: set[tuple[int, int]],
    root: int,
    decay: float,
) -> OrientedGraph:
    """Core orientation over a bare (ids, edges) tree; see orient_and_weight."""
    if not 0.0 < decay < 1.0:
        raise RangeError(f"decay must lie in (0, 1), got {decay}")
    if root not in node_ids:
        raise NotFoundError(f"unknown node {root}")
    order = sorted(node_ids)
    index = {n: i for i, n in enumerate(order)}
    dist = bfs_distances(order, edges, root)
    if len(dist) != len(order):
        raise NotFoundError("edge set does not connect all nodes")
    n = len(order)
    adjacency = np.zeros((n, n), dtype=np.float64)
    for a, b in edges:
        src, dst = (a, b) if dist[a] < dist[b] else (b, a)
        adjacency[index[src], index[dst]] = decay ** dist[dst]
    return OrientedGraph(
        vertex_order=order, adjacency=adjacency, root=root, decay=decay, distances=dist
    )


def orient_and_weight(tree: ParsingTree, new_leaf: int, decay: float) -> OrientedGraph:
    """Orient all tree edges away from ``new_leaf`` with geometric decay weights.

    The weight of the edge into v_j is decay^d(v_j, new_leaf), so exactly
    |nodes| - 1 entries of the adjacency are nonzero.
    """
    if new_leaf not in tree.nodes:
        raise NotFoundError(f"unknown node {new_leaf}")
    return orient_edges(tree.node_ids(), tree.edges, new_leaf, decay)


def transition_matrix(g: OrientedGraph, teleport: float) -> TransitionMatrix:
    """Row-stochastic transition matrix with uniform teleportation.

    Zero out-degree rows are replaced by the uniform row 1/|V| before degree
    normalization, then T = (1 - teleport) * D^-1 A' + teleport/|V| * ones.
    """
    if not 0.0 < teleport < 1.0:
        raise RangeError(f"teleport must lie in (0, 1), got {teleport}")
    a = g.adjacency.copy()
    n = a.shape[0]
    row_sums = a.sum(axis=1)
    dangling = row_sums == 0.0
    a[dangling] = 1.0 / n
    row_sums = a.sum(axis=1)
    t = (1.0 - teleport) * (a / row_sums[:, None]) + teleport / n
    return TransitionMatrix(matrix=t, teleport=teleport)


def stationary_distribution(
    t: TransitionMatrix, tol: float = 1e-12, max_iter: int = 10000
) -> StationaryDist:
    """Left eigenvector of T with eigenvalue 1, by power iteration from uniform.

    Stops when the L1 step change drops below ``tol``; raises ConvergenceError
    (carrying the last residual) if ``max_iter`` is hit first.
    """
    m = t.matrix
    n = m.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ m
        nxt /= nxt.sum()
        delta = np.abs(nxt - pi).sum()
        pi = nxt
        if delta < tol:
            residual = float(np.abs(pi @ m - pi).sum())
            return StationaryDist(pi=pi, residual=residual)
    residual = float(np.abs(pi @ m - pi).sum())
    raise ConvergenceError(
        f"power iteration did not reach tol={tol} in {max_iter} iterations "
        f"(last residual {residual:.3e})",
        residual=residual,
    )


def propagation_matrix(t: TransitionMatrix, stationary: StationaryDist) -> np.ndarray:
    """Symmetrized propagation operator 0.5 * (S^1/2 T S^-1/2 + S^-1/2 T' S^1/2).

    S is the stationary distribution normalized to unit L1 mass on the
    diagonal. Output is exactly symmetric because it is assembled as the mean
    of a matrix and its transpose.
    """
    pi = stationary.pi
    if np.any(pi <= 0.0):
        raise DegeneracyError("stationary distribution has a non-positive entry")
    scale = pi / np.abs(pi).sum()
    sqrt = np.sqrt(scale)
    b = (sqrt[:, None] * t.matrix) / sqrt[None, :]
    return 0.5 * (b + b.T)


def debug_dump(tree: ParsingTree, new_leaf: int, decay: float, teleport: float) -> dict:
    """A, T, pi, and the propagation operator as one JSON-ready object."""
    g = orient_and_weight(tree, new_leaf, decay)
    t = transition_matrix(g, teleport)
    pi = stationary_distribution(t)
    p_sym = propagation_matrix(t, pi)
    return {
        "vertex_order": g.vertex_order,
        "root": g.root,
        "decay": decay,
        "teleport": teleport,
        "adjacency": [[float(x) for x in row] for row in g.adjacency],
        "transition": [[float(x) for x in row] for row in t.matrix],
        "stationary": [float(x) for x in pi.pi],
        "stationary_residual": pi.residual,
        "propagation": [[float(x) for x in row] for row in p_sym],
    }
