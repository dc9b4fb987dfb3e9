"""Spatial graphs and the unified space-time graph built from them.

The unified graph has one element per (node, time) pair across a window of
T steps. Two elements are adjacent when they are the same node at
consecutive steps, or neighbors in the spatial graph at the same step.
Flat element ids are time major: flat = time * n_nodes + node.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, InputError


@dataclass(frozen=True)
class STCoord:
    """A (node, time) position on the unified graph."""

    node: int
    time: int

    def flat(self, n_nodes: int) -> int:
        return self.time * n_nodes + self.node


def coord_from_flat(flat: int, n_nodes: int) -> STCoord:
    return STCoord(node=flat % n_nodes, time=flat // n_nodes)


@dataclass
class SpatialGraph:
    """A weighted undirected sensor graph."""

    n_nodes: int
    adjacency: np.ndarray
    edges: list[tuple[int, int, float]]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [str(i) for i in range(self.n_nodes)]

    def neighbor_lists(self) -> list[np.ndarray]:
        """Sorted neighbor ids per node over the nonzero support."""
        out = []
        for i in range(self.n_nodes):
            out.append(np.flatnonzero(self.adjacency[i]).astype(np.int64))
        return out


def _iter_lines(source) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise InputError(f"graph file not found: {path}")
        with open(path) as fh:
            yield from fh
    else:
        yield from source


def load_spatial_graph(source, symmetrize: bool = True) -> SpatialGraph:
    """Parse an edge-list description of the sensor graph.

    Each payload line is "src dst [weight]" with weight defaulting to 1.0.
    Lines starting with '#' and blank lines are skipped. An optional
    directive "nodes <N>" declares the node count up front, in which case
    ids must be integers in [0, N); isolated nodes are then allowed.
    Without the directive, ids are compacted to [0, N) in first-appearance
    order. Negative weights are rejected; self loops are kept with a
    warning. By default the matrix is symmetrized as max(A, A^T).
    """
    declared: int | None = None
    raw_edges: list[tuple[str, str, float]] = []
    order: dict[str, int] = {}

    for line_no, raw in enumerate(_iter_lines(source), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "nodes":
            if len(parts) != 2:
                raise InputError(f"line {line_no}: malformed nodes directive: {line!r}")
            if raw_edges or order:
                raise InputError(f"line {line_no}: nodes directive must come before edges")
            try:
                declared = int(parts[1])
            except ValueError:
                raise InputError(f"line {line_no}: node count must be an integer")
            if declared <= 0:
                raise InputError(f"line {line_no}: node count must be positive")
            continue
        if len(parts) not in (2, 3):
            raise InputError(f"line {line_no}: expected 'src dst [weight]', got {line!r}")
        src, dst = parts[0], parts[1]
        weight = 1.0
        if len(parts) == 3:
            try:
                weight = float(parts[2])
            except ValueError:
                raise InputError(f"line {line_no}: bad weight {parts[2]!r}")
        if not np.isfinite(weight):
            raise InputError(f"line {line_no}: weight must be finite")
        if weight < 0.0:
            raise InputError(f"line {line_no}: negative weight {weight} is not allowed")
        if declared is not None:
            for token in (src, dst):
                try:
                    idx = int(token)
                except ValueError:
                    raise InputError(
                        f"line {line_no}: with a nodes directive ids must be integers, got {token!r}"
                    )
                if not 0 <= idx < declared:
                    raise InputError(f"line {line_no}: node id {idx} outside [0, {declared})")
        else:
            for token in (src, dst):
                if token not in order:
                    order[token] = len(order)
        raw_edges.append((src, dst, weight))

    if declared is not None:
        n = declared
        labels = [str(i) for i in range(n)]
        index = {str(i): i for i in range(n)}
    else:
        n = len(order)
        if n == 0:
            raise InputError("graph has no nodes: give edges or a 'nodes <N>' directive")
        labels = list(order)
        index = order

    adjacency = np.zeros((n, n), dtype=np.float64)
    edges: list[tuple[int, int, float]] = []
    for src, dst, weight in raw_edges:
        i, j = index[src], index[dst]
        if i == j:
            warnings.warn(f"self loop on node {src} kept as given", stacklevel=2)
        adjacency[i, j] = weight
        edges.append((i, j, weight))

    if symmetrize:
        adjacency = np.maximum(adjacency, adjacency.T)

    return SpatialGraph(n_nodes=n, adjacency=adjacency, edges=edges, labels=labels)


class UnifiedGraph:
    """Unified space-time graph over n_nodes * T elements.

    Adjacency is stored as sorted neighbor lists over the nonzero support;
    spatial edge weights are kept on the SpatialGraph for consumers that
    need them (Laplacian, exports). Distances only use the support.
    """

    def __init__(self, spatial: SpatialGraph, t_steps: int):
        if t_steps <= 0:
            raise ContractError(f"window length must be positive, got {t_steps}")
        self.spatial = spatial
        self.t_steps = t_steps
        self.n_nodes = spatial.n_nodes
        self.n_elements = spatial.n_nodes * t_steps

        n, t_count = self.n_nodes, self.t_steps
        spatial_neighbors = spatial.neighbor_lists()
        self.neighbors: list[np.ndarray] = []
        for t in range(t_count):
            base = t * n
            for i in range(n):
                near = list(base + spatial_neighbors[i])
                if t > 0:
                    near.append((t - 1) * n + i)
                if t < t_count - 1:
                    near.append((t + 1) * n + i)
                self.neighbors.append(np.array(sorted(near), dtype=np.int64))

    @property
    def edge_entry_count(self) -> int:
        """Number of nonzero directed entries in the unified adjacency."""
        return sum(len(lst) for lst in self.neighbors)

    def coord_to_flat(self, coord: STCoord) -> int:
        if not (0 <= coord.node < self.n_nodes and 0 <= coord.time < self.t_steps):
            raise ContractError(f"coordinate {coord} outside {self.n_nodes} nodes x {self.t_steps} steps")
        return coord.flat(self.n_nodes)

    def flat_to_coord(self, flat: int) -> STCoord:
        if not 0 <= flat < self.n_elements:
            raise ContractError(f"flat id {flat} outside [0, {self.n_elements})")
        return coord_from_flat(flat, self.n_nodes)

    def distances_from(self, start: int, cutoff: int | None = None) -> np.ndarray:
        """BFS hop counts from a flat element id; -1 marks unreachable."""
        dist = np.full(self.n_elements, -1, dtype=np.int64)
        dist[start] = 0
        queue = deque([start])
        while queue:
            u = queue.popleft()
            d = dist[u]
            if cutoff is not None and d >= cutoff:
                continue
            for v in self.neighbors[u]:
                if dist[v] < 0:
                    dist[v] = d + 1
                    queue.append(v)
        return dist

    def iter_edges(self) -> Iterator[tuple[int, int, float]]:
        """Directed nonzero entries of the unified adjacency with weights."""
        n = self.n_nodes
        adjacency = self.spatial.adjacency
        for u, near in enumerate(self.neighbors):
            t_u, i_u = divmod(u, n)
            for v in near:
                t_v, i_v = divmod(int(v), n)
                if i_u == i_v and abs(t_u - t_v) == 1:
                    yield u, int(v), 1.0
                else:
                    yield u, int(v), float(adjacency[i_u, i_v])


def build_unified(spatial: SpatialGraph, t_steps: int) -> UnifiedGraph:
    """Assemble the unified space-time graph for a window of t_steps."""
    return UnifiedGraph(spatial, t_steps)


def st_distance(graph: UnifiedGraph, a: STCoord, b: STCoord) -> int | None:
    """Fewest hops between two elements, or None when disconnected."""
    fa, fb = graph.coord_to_flat(a), graph.coord_to_flat(b)
    if fa == fb:
        return 0
    dist = graph.distances_from(fa)
    d = int(dist[fb])
    return None if d < 0 else d


def ball(graph: UnifiedGraph, center: STCoord, radius: int) -> set[STCoord]:
    """All elements within the given hop radius of the center, inclusive."""
    if radius < 0:
        raise ContractError(f"ball radius must be nonnegative, got {radius}")
    start = graph.coord_to_flat(center)
    dist = graph.distances_from(start, cutoff=radius)
    hits = np.flatnonzero((dist >= 0) & (dist <= radius))
    return {graph.flat_to_coord(int(f)) for f in hits}
