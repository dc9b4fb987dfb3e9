"""Subset partitions of the unified space-time graph.

Elements are grouped around base nodes so attention can run within small
local neighborhoods. Two complementary partitions are built: the primary
one around cluster centers, and a shifted one whose bases are displaced
about half a neighborhood radius, so information can cross the primary
boundaries on the next pass.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError
from .stgraph import STCoord, SpatialGraph, UnifiedGraph


# ---------------------------------------------------------------------------
# base node selection
# ---------------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300, tol: float = 1e-8):
    """Plain Lloyd iteration with k-means++ seeding.

    Deterministic for a fixed seed. Returns (centroids (k, dim), labels (n,)).
    Empty clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0.0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centroids[j] = points[pick]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        sq = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = sq.argmin(axis=1)
        moved = 0.0
        for j in range(k):
            members = points[labels == j]
            if len(members) == 0:
                continue
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centroids[j])))
            centroids[j] = new
        if moved < tol:
            break
    return centroids, labels


def select_base_nodes(spe_coords: np.ndarray, n_subsets: int, seed: int) -> list[int]:
    """Pick one representative spatial node per k-means cluster.

    Clustering runs over the spectral coordinates (one row per node). For
    each cluster, the node nearest its centroid is chosen; distance ties
    break toward the lower node id, and a node already claimed by an
    earlier cluster falls through to the next nearest unused one.
    """
    coords = np.asarray(spe_coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= n_subsets <= n:
        raise ContractError(f"subset count must be in [1, {n}], got {n_subsets}")
    centroids, _ = kmeans(coords, n_subsets, seed)

    chosen: list[int] = []
    used: set[int] = set()
    for j in range(n_subsets):
        dist = np.linalg.norm(coords - centroids[j], axis=1)
        for node in sorted(range(n), key=lambda i: (dist[i], i)):
            if node not in used:
                chosen.append(node)
                used.add(node)
                break
    return chosen


@dataclass
class BaseNodeSet:
    """Base spatial nodes pinned to the central time step of the window."""

    node_ids: list[int]
    t_center: int
    tau: int | None = None

    @property
    def n_subsets(self) -> int:
        return len(self.node_ids)

    def coords(self) -> list[STCoord]:
        return [STCoord(node=i, time=self.t_center) for i in self.node_ids]


def make_base_set(graph: UnifiedGraph, spe_coords: np.ndarray, n_subsets: int, seed: int) -> BaseNodeSet:
    nodes = select_base_nodes(spe_coords, n_subsets, seed)
    return BaseNodeSet(node_ids=nodes, t_center=graph.t_steps // 2)


def calibrate_tau(graph: UnifiedGraph, bases: BaseNodeSet) -> int:
    """Smallest radius covering every element from some base.

    The radius is never below floor(T / 2) so a base can reach both ends
    of its own time column. Raises when some element is unreachable from
    every base.
    """
    floor = graph.t_steps // 2
    best = _min_distances(graph, bases)
    unreachable = np.flatnonzero(best < 0)
    if unreachable.size:
        coord = graph.flat_to_coord(int(unreachable[0]))
        raise ContractError(
            f"element (node={coord.node}, time={coord.time}) is unreachable from every base"
        )
    return max(int(best.max()), floor)


def _min_distances(graph: UnifiedGraph, bases: BaseNodeSet) -> np.ndarray:
    """Elementwise min hop count to the nearest base; -1 when none reaches."""
    stack = _distance_matrix(graph, bases)
    masked = np.where(stack < 0, np.iinfo(np.int64).max, stack)
    best = masked.min(axis=0)
    best[best == np.iinfo(np.int64).max] = -1
    return best


def _distance_matrix(graph: UnifiedGraph, bases: BaseNodeSet) -> np.ndarray:
    rows = [graph.distances_from(c.flat(graph.n_nodes)) for c in bases.coords()]
    return np.stack(rows, axis=0)


# ---------------------------------------------------------------------------
# partition construction
# ---------------------------------------------------------------------------


@dataclass
class PartitionScheme:
    """A disjoint cover of all unified-graph elements by local subsets."""

    label: str
    n_elements: int
    tau: int
    base_flats: list[int]
    assignment: np.ndarray
    subsets: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.subsets:
            self.subsets = [
                np.flatnonzero(self.assignment == p).astype(np.int64)
                for p in range(len(self.base_flats))
            ]

    @property
    def n_subsets(self) -> int:
        return len(self.base_flats)

    def subset_of(self, flat: int) -> int:
        return int(self.assignment[flat])


def _assign(graph: UnifiedGraph, bases: BaseNodeSet, tau: int, label: str) -> PartitionScheme:
    dist = _distance_matrix(graph, bases)
    dist = np.where(dist < 0, np.iinfo(np.int64).max, dist)
    best = dist.min(axis=0)

    bad = np.flatnonzero(best > tau)
    if bad.size:
        coord = graph.flat_to_coord(int(bad[0]))
        raise ContractError(
            f"{label}: element (node={coord.node}, time={coord.time}) not within "
            f"tau={tau} of any base"
        )

    sizes = [0] * bases.n_subsets
    assignment = np.empty(graph.n_elements, dtype=np.int64)
    for e in range(graph.n_elements):
        tied = np.flatnonzero(dist[:, e] == best[e])
        if len(tied) == 1:
            p = int(tied[0])
        else:
            # distance tie: favor the currently smaller subset, then the
            # lower base index
            p = min((int(q) for q in tied), key=lambda q: (sizes[q], q))
        assignment[e] = p
        sizes[p] += 1

    scheme = PartitionScheme(
        label=label,
        n_elements=graph.n_elements,
        tau=tau,
        base_flats=[c.flat(graph.n_nodes) for c in bases.coords()],
        assignment=assignment,
    )
    for p, flat in enumerate(scheme.base_flats):
        if scheme.assignment[flat] != p:
            raise ContractError(f"{label}: subset {p} does not contain its own base element")
    return scheme


def build_p1(graph: UnifiedGraph, bases: BaseNodeSet) -> PartitionScheme:
    """Assign every element to its nearest base within radius tau."""
    if bases.tau is None:
        raise ContractError("bases need a calibrated tau before partitioning")
    return _assign(graph, bases, bases.tau, "P1")


def _spatial_distances(spatial: SpatialGraph, start: int) -> np.ndarray:
    neighbor_lists = spatial.neighbor_lists()
    dist = np.full(spatial.n_nodes, -1, dtype=np.int64)
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in neighbor_lists[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(int(v))
    return dist


def shift_bases(graph: UnifiedGraph, bases: BaseNodeSet) -> BaseNodeSet:
    """Displace each base about half a radius toward its nearest peer.

    Each base walks floor(tau / 2) hops (capped at the peer itself) along
    one spatial shortest path toward the nearest other base, choosing the
    lowest next node id when several shortest paths exist. With a single
    base, or for a base that cannot reach any other, the base stays put.
    Collisions between shifted bases back off along the walked path so the
    shifted set stays distinct.
    """
    if bases.tau is None:
        raise ContractError("bases need a calibrated tau before shifting")
    if bases.n_subsets == 1:
        return BaseNodeSet(list(bases.node_ids), bases.t_center, bases.tau)

    spatial = graph.spatial
    neighbor_lists = spatial.neighbor_lists()
    dist_from_base = {b: _spatial_distances(spatial, b) for b in bases.node_ids}
    hops_budget = bases.tau // 2

    shifted: list[int] = []
    used: set[int] = set()
    for p, b in enumerate(bases.node_ids):
        peers = [
            (int(dist_from_base[other][b]), qi)
            for qi, other in enumerate(bases.node_ids)
            if qi != p and dist_from_base[other][b] >= 0
        ]
        if not peers:
            warnings.warn(f"base {b} cannot reach any other base; left unshifted")
            target_path = [b]
        else:
            d_near, qi = min(peers)
            toward = dist_from_base[bases.node_ids[qi]]
            steps = min(hops_budget, d_near)
            target_path = [b]
            cur = b
            for _ in range(steps):
                nxt = min(
                    int(v) for v in neighbor_lists[cur] if toward[v] == toward[cur] - 1
                )
                target_path.append(nxt)
                cur = nxt

        landing = target_path[-1]
        if landing in used:
            landing = next(
                (node for node in reversed(target_path) if node not in used),
                None,
            )
            if landing is None:
                landing = next(i for i in range(spatial.n_nodes) if i not in used)
            warnings.warn(
                f"shifted base for subset {p} collided; backed off to node {landing}"
            )
        used.add(landing)
        shifted.append(landing)

    return BaseNodeSet(node_ids=shifted, t_center=bases.t_center, tau=bases.tau)


def build_p2(graph: UnifiedGraph, shifted: BaseNodeSet) -> PartitionScheme:
    """Partition around the shifted bases.

    The primary radius is kept as a floor; if the shifted bases fail to
    cover every element at that radius, the radius is recalibrated upward
    for this scheme only, with a warning.
    """
    if shifted.tau is None:
        raise ContractError("shifted bases need the primary tau before partitioning")
    best = _min_distances(graph, shifted)
    unreachable = np.flatnonzero(best < 0)
    if unreachable.size:
        coord = graph.flat_to_coord(int(unreachable[0]))
        raise ContractError(
            f"P2: element (node={coord.node}, time={coord.time}) is unreachable "
            "from every shifted base"
        )
    needed = int(best.max())
    tau = shifted.tau
    if needed > tau:
        warnings.warn(f"shifted cover needs tau={needed}, recalibrated up from {tau}")
        tau = needed
    widened = BaseNodeSet(list(shifted.node_ids), shifted.t_center, tau)
    return _assign(graph, widened, tau, "P2")


# ---------------------------------------------------------------------------
# diagnostics and serialization
# ---------------------------------------------------------------------------

SIZE_RATIO_WARN = 4.0
OVERLAP_BAND = (0.25, 0.75)


@dataclass
class PartitionReport:
    sizes_p1: list[int]
    sizes_p2: list[int]
    size_ratio_p1: float
    size_ratio_p2: float
    overlap: list[float]
    tau_p1: int
    tau_p2: int
    warnings: list[str]

    def to_text(self) -> str:
        lines = [
            f"subsets: {len(self.sizes_p1)}",
            f"tau: primary {self.tau_p1}, shifted {self.tau_p2}",
            f"sizes primary: {self.sizes_p1}",
            f"sizes shifted: {self.sizes_p2}",
            f"size ratio max/median: primary {self.size_ratio_p1:.3f}, "
            f"shifted {self.size_ratio_p2:.3f}",
            "overlap |P2_p & P1_p| / |P1_p|: "
            + ", ".join(f"{v:.3f}" for v in self.overlap),
        ]
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _size_ratio(sizes: list[int]) -> float:
    return float(max(sizes) / np.median(sizes))


def partition_report(p1: PartitionScheme, p2: PartitionScheme) -> PartitionReport:
    """Size balance and overlap diagnostics for a partition pair."""
    if p1.n_elements != p2.n_elements or p1.n_subsets != p2.n_subsets:
        raise ContractError("partition pair does not describe the same element set")
    sizes_p1 = [len(s) for s in p1.subsets]
    sizes_p2 = [len(s) for s in p2.subsets]
    overlap = []
    for p in range(p1.n_subsets):
        a, b = set(p1.subsets[p].tolist()), set(p2.subsets[p].tolist())
        overlap.append(len(a & b) / len(a))

    notes: list[str] = []
    ratio1, ratio2 = _size_ratio(sizes_p1), _size_ratio(sizes_p2)
    if ratio1 > SIZE_RATIO_WARN:
        notes.append(f"primary size ratio {ratio1:.2f} exceeds {SIZE_RATIO_WARN}")
    if ratio2 > SIZE_RATIO_WARN:
        notes.append(f"shifted size ratio {ratio2:.2f} exceeds {SIZE_RATIO_WARN}")
    lo, hi = OVERLAP_BAND
    for p, v in enumerate(overlap):
        if not lo <= v <= hi:
            notes.append(f"overlap {v:.2f} for subset {p} outside [{lo}, {hi}] band")
    if p2.tau > p1.tau:
        notes.append(f"shifted tau {p2.tau} is above primary tau {p1.tau}")

    return PartitionReport(
        sizes_p1=sizes_p1,
        sizes_p2=sizes_p2,
        size_ratio_p1=ratio1,
        size_ratio_p2=ratio2,
        overlap=overlap,
        tau_p1=p1.tau,
        tau_p2=p2.tau,
        warnings=notes,
    )


def write_partition(scheme: PartitionScheme, path) -> None:
    """Write "flat_index subset_id" lines under the scheme header block."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# scheme {scheme.label}\n")
        fh.write(f"# l {scheme.n_subsets}\n")
        fh.write(f"# tau {scheme.tau}\n")
        fh.write("# bases " + ",".join(str(b) for b in scheme.base_flats) + "\n")
        for flat in range(scheme.n_elements):
            fh.write(f"{flat} {int(scheme.assignment[flat])}\n")


def read_partition(path) -> PartitionScheme:
    path = Path(path)
    if not path.exists():
        raise InputError(f"partition file not found: {path}")
    header: dict[str, str] = {}
    rows: list[tuple[int, int]] = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split(None, 1)
                if len(parts) == 2:
                    header[parts[0]] = parts[1]
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{line_no}: expected 'flat_index subset_id'")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise InputError(f"{path}:{line_no}: ids must be integers")

    for key in ("scheme", "l", "tau", "bases"):
        if key not in header:
            raise InputError(f"{path}: missing '# {key}' header")
    label = header["scheme"]
    try:
        n_subsets = int(header["l"])
        tau = int(header["tau"])
        base_flats = [int(tok) for tok in header["bases"].split(",")]
    except ValueError:
        raise InputError(f"{path}: malformed header values")
    if len(base_flats) != n_subsets:
        raise InputError(f"{path}: {len(base_flats)} bases listed for l={n_subsets}")

    n_elements = len(rows)
    assignment = np.full(n_elements, -1, dtype=np.int64)
    for flat, subset in rows:
        if not 0 <= flat < n_elements:
            raise InputError(f"{path}: flat index {flat} out of range for {n_elements} rows")
        if not 0 <= subset < n_subsets:
            raise InputError(f"{path}: subset id {subset} out of range for l={n_subsets}")
        if assignment[flat] != -1:
            raise InputError(f"{path}: duplicate row for flat index {flat}")
        assignment[flat] = subset
    return PartitionScheme(
        label=label,
        n_elements=n_elements,
        tau=tau,
        base_flats=base_flats,
        assignment=assignment,
    )
