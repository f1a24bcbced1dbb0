"""Dynamic social graphs: snapshot construction and per-node structural metrics.

A :class:`DynamicGraph` is an ordered list of :class:`Snapshot` objects built
from timestamped interaction records.  The metrics here (local clustering
coefficient and bidirectional-links ratio) are exact and feed the temporal
position embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86_400
FOLLOW = 0

OUT = 0
IN = 1


class GraphError(ValueError):
    """Raised for invalid interaction data or snapshot configuration."""


@dataclass(frozen=True)
class InteractionRecord:
    source: int
    target: int
    timestamp: int
    relation: int = FOLLOW


@dataclass(frozen=True)
class SnapshotConfig:
    """How records are cut into snapshots.

    ``interval`` is in days.  Boundary ``k`` sits at
    ``origin + (k + 1) * interval`` and snapshot ``k`` holds records with
    ``timestamp <= boundary`` (cumulative) or those falling after the previous
    boundary (windowed).
    """

    interval: float
    origin: int = 0
    num_snapshots: int | None = None
    cumulative: bool = True
    allow_self_loops: bool = False

    def __post_init__(self):
        if not self.interval > 0:
            raise GraphError(f"interval must be positive, got {self.interval}")
        if self.num_snapshots is not None and self.num_snapshots < 1:
            raise GraphError(f"num_snapshots must be >= 1, got {self.num_snapshots}")

    @property
    def interval_seconds(self) -> float:
        return self.interval * SECONDS_PER_DAY


@dataclass(frozen=True)
class IngestReport:
    num_records: int
    excluded_after_last_boundary: int
    clamped_before_origin: int
    duplicates: int
    nodes_per_snapshot: tuple[int, ...]
    edges_per_snapshot: tuple[int, ...]

    def lines(self) -> list[str]:
        out = [
            f"records: {self.num_records}",
            f"excluded (after last boundary): {self.excluded_after_last_boundary}",
            f"clamped (before origin): {self.clamped_before_origin}",
            f"duplicate edges merged: {self.duplicates}",
            "snapshot,nodes,edges",
        ]
        for k, (n, e) in enumerate(zip(self.nodes_per_snapshot, self.edges_per_snapshot)):
            out.append(f"{k},{n},{e}")
        return out


class Snapshot:
    """One graph state.

    ``edges`` is an ``(E, 3)`` int array of unique ``(source, target, relation)``
    rows sorted lexicographically.  Adjacency views are derived lazily.
    """

    def __init__(self, index: int, boundary: int, edges: np.ndarray, node_active: np.ndarray):
        self.index = index
        self.boundary = boundary
        self.edges = edges
        self.node_active = node_active
        self._undirected: list[set[int]] | None = None
        self._out: list[list[tuple[int, int]]] | None = None
        self._in: list[list[tuple[int, int]]] | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_active)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.index == other.index
            and self.boundary == other.boundary
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_active, other.node_active)
        )

    def __repr__(self):
        return (
            f"Snapshot(index={self.index}, boundary={self.boundary}, "
            f"edges={self.num_edges}, active={int(self.node_active.sum())})"
        )

    def _build_views(self):
        n = self.num_nodes
        und: list[set[int]] = [set() for _ in range(n)]
        out: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        inc: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for s, t, r in self.edges.tolist():
            out[s].append((t, r))
            inc[t].append((s, r))
            if s != t:
                und[s].add(t)
                und[t].add(s)
        for lst in inc:
            lst.sort()
        self._undirected, self._out, self._in = und, out, inc

    def adjacency(self, node: int) -> list[tuple[int, int, int]]:
        """Sorted ``(neighbor, direction, relation)`` entries of ``node``."""
        if self._out is None:
            self._build_views()
        entries = [(t, OUT, r) for t, r in self._out[node]]
        entries += [(s, IN, r) for s, r in self._in[node]]
        entries.sort()
        return entries

    def undirected_sets(self) -> list[set[int]]:
        if self._undirected is None:
            self._build_views()
        return self._undirected

    def out_edges(self, node: int) -> list[tuple[int, int]]:
        if self._out is None:
            self._build_views()
        return self._out[node]

    def in_edges(self, node: int) -> list[tuple[int, int]]:
        if self._in is None:
            self._build_views()
        return self._in[node]


@dataclass
class DynamicGraph:
    snapshots: list[Snapshot]
    num_nodes: int
    config: SnapshotConfig | None = None
    report: IngestReport | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.snapshots)

    def __eq__(self, other):
        if not isinstance(other, DynamicGraph):
            return NotImplemented
        return self.num_nodes == other.num_nodes and self.snapshots == other.snapshots

    @property
    def boundaries(self) -> list[int]:
        return [s.boundary for s in self.snapshots]

    def active_matrix(self) -> np.ndarray:
        """Boolean ``(num_snapshots, num_nodes)`` activity table."""
        return np.stack([s.node_active for s in self.snapshots])


def _as_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(records, np.ndarray):
        arr = np.asarray(records, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise GraphError("record array must have shape (R, 4): source, target, timestamp, relation")
        return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    rows = [(r.source, r.target, r.timestamp, r.relation) for r in records]
    if not rows:
        return (np.empty(0, np.int64),) * 4
    arr = np.array(rows, dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def build_snapshots(
    records: Sequence[InteractionRecord] | np.ndarray,
    config: SnapshotConfig,
    num_nodes: int | None = None,
) -> DynamicGraph:
    """Cut ``records`` into ``config.num_snapshots`` snapshots.

    Records earlier than ``config.origin`` are clamped into snapshot 0;
    records after the last boundary are dropped.  Both counts land in the
    returned graph's ``report``.  A node is active at snapshot ``k`` once it
    has appeared as an endpoint of any record kept up to boundary ``k``.
    """
    src, dst, ts, rel = _as_arrays(records)
    if len(src) == 0:
        raise GraphError("no interactions")
    if (src < 0).any() or (dst < 0).any():
        raise GraphError("node ids must be non-negative")
    if (ts < 0).any():
        raise GraphError("timestamps must be non-negative")
    if not config.allow_self_loops and (src == dst).any():
        i = int(np.flatnonzero(src == dst)[0])
        raise GraphError(f"self-loop {int(src[i])}->{int(dst[i])} rejected (record {i})")

    n = int(max(src.max(), dst.max())) + 1
    if num_nodes is not None:
        if num_nodes < n:
            raise GraphError(f"num_nodes={num_nodes} but records reference node {n - 1}")
        n = num_nodes

    step = config.interval_seconds
    if config.num_snapshots is None:
        span = float(ts.max() - config.origin)
        num = max(1, int(np.ceil(span / step)))
    else:
        num = config.num_snapshots
    boundaries = [int(config.origin + (k + 1) * step) for k in range(num)]

    clamped = int((ts < config.origin).sum())
    keep = ts <= boundaries[-1]
    excluded = int((~keep).sum())
    src, dst, ts, rel = src[keep], dst[keep], ts[keep], rel[keep]
    # snapshot index of each record: first k with ts <= boundary_k
    slot = np.searchsorted(np.asarray(boundaries), ts, side="left")

    # first appearance of each (s, t, r) triple decides when the edge exists
    order = np.lexsort((slot, rel, dst, src))
    src, dst, rel, slot = src[order], dst[order], rel[order], slot[order]
    ts_sorted_first = np.ones(len(src), dtype=bool)
    if len(src) > 1:
        same = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1]) & (rel[1:] == rel[:-1])
        ts_sorted_first[1:] = ~same
    duplicates = int((~ts_sorted_first).sum())

    node_first = np.full(n, num, dtype=np.int64)
    np.minimum.at(node_first, src, slot)
    np.minimum.at(node_first, dst, slot)

    snapshots = []
    for k in range(num):
        if config.cumulative:
            sel = ts_sorted_first & (slot <= k)
        else:
            in_window = slot == k
            sel = np.zeros(len(src), dtype=bool)
            if in_window.any():
                # dedup within the window only
                idx = np.flatnonzero(in_window)
                trip = np.stack([src[idx], dst[idx], rel[idx]], axis=1)
                _, first = np.unique(trip, axis=0, return_index=True)
                sel[idx[first]] = True
        edges = np.stack([src[sel], dst[sel], rel[sel]], axis=1).astype(np.int64)
        edges = edges[np.lexsort((edges[:, 2], edges[:, 1], edges[:, 0]))] if len(edges) else edges.reshape(0, 3)
        active = node_first <= k
        snapshots.append(Snapshot(k, boundaries[k], edges, active))

    report = IngestReport(
        num_records=int(len(keep)),
        excluded_after_last_boundary=excluded,
        clamped_before_origin=clamped,
        duplicates=duplicates,
        nodes_per_snapshot=tuple(int(s.node_active.sum()) for s in snapshots),
        edges_per_snapshot=tuple(s.num_edges for s in snapshots),
    )
    return DynamicGraph(snapshots, n, config, report)


def neighborhood(snapshot: Snapshot, node: int) -> list[int]:
    """Direction-collapsed neighbors of ``node`` in ascending id order, self excluded."""
    return sorted(snapshot.undirected_sets()[node])


def total_degree(snapshot: Snapshot, node: int) -> int:
    """In-degree plus out-degree; a mutual pair contributes 2, each relation separately."""
    return sum(1 for t, _ in snapshot.out_edges(node) if t != node) + sum(
        1 for s, _ in snapshot.in_edges(node) if s != node
    )


def neighbor_edge_count(snapshot: Snapshot, node: int) -> int:
    """Unique direction-collapsed edges among the neighbors of ``node``."""
    und = snapshot.undirected_sets()
    nbrs = und[node] - {node}
    twice = 0
    for u in nbrs:
        twice += len((und[u] - {u}) & nbrs)
    return twice // 2


def local_clustering_coefficient(snapshot: Snapshot, node: int) -> float:
    k = total_degree(snapshot, node)
    if k < 2:
        return 0.0
    return 2.0 * neighbor_edge_count(snapshot, node) / (k * (k - 1))


def _follow_counts(snapshot: Snapshot, node: int, follow: int = FOLLOW) -> tuple[int, int]:
    followings = {t for t, r in snapshot.out_edges(node) if r == follow and t != node}
    followers = {s for s, r in snapshot.in_edges(node) if r == follow and s != node}
    return len(followings), len(followings & followers)


def bidirectional_links_ratio(snapshot: Snapshot, node: int, follow: int = FOLLOW) -> float:
    fing, blinks = _follow_counts(snapshot, node, follow)
    if fing == 0:
        return 0.0
    return blinks / fing


@dataclass
class SnapshotMetrics:
    """Per-(snapshot, node) metric tables, each shaped ``(num_snapshots, num_nodes)``."""

    lcc: np.ndarray
    blr: np.ndarray
    degree_total: np.ndarray
    num_followings: np.ndarray
    num_bidirectional: np.ndarray
    neighbor_edge_count: np.ndarray


def compute_metrics(graph: DynamicGraph, follow: int = FOLLOW) -> SnapshotMetrics:
    shape = (len(graph.snapshots), graph.num_nodes)
    lcc = np.zeros(shape)
    blr = np.zeros(shape)
    deg = np.zeros(shape, dtype=np.int64)
    fing = np.zeros(shape, dtype=np.int64)
    blinks = np.zeros(shape, dtype=np.int64)
    nec = np.zeros(shape, dtype=np.int64)
    for k, snap in enumerate(graph.snapshots):
        for v in np.flatnonzero(snap.node_active).tolist():
            d = total_degree(snap, v)
            e = neighbor_edge_count(snap, v)
            f, b = _follow_counts(snap, v, follow)
            deg[k, v], nec[k, v], fing[k, v], blinks[k, v] = d, e, f, b
            if d >= 2:
                lcc[k, v] = 2.0 * e / (d * (d - 1))
            if f > 0:
                blr[k, v] = b / f
    return SnapshotMetrics(lcc, blr, deg, fing, blinks, nec)


def records_from_edges(edges: Iterable[tuple[int, int]], timestamp: int = 0, relation: int = FOLLOW):
    """Convenience for tests and small examples."""
    return [InteractionRecord(int(s), int(t), int(timestamp), int(relation)) for s, t in edges]
