"""Dynamic graphs as sequences of weighted undirected snapshots over a fixed node set."""

from __future__ import annotations

import os
from collections import defaultdict
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Malformed line in an edge-list or feature file."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class NodeRangeError(ValueError):
    pass


class Snapshot:
    """One weighted undirected graph.

    Edges are kept in both directions, sorted by (src, dst), with a CSR
    row pointer so ``neighbors(v)`` is a slice.
    """

    def __init__(self, num_nodes: int, src: np.ndarray, dst: np.ndarray, weight: np.ndarray):
        order = np.lexsort((dst, src))
        self.num_nodes = int(num_nodes)
        self.src = np.ascontiguousarray(src[order], dtype=np.int64)
        self.dst = np.ascontiguousarray(dst[order], dtype=np.int64)
        self.weight = np.ascontiguousarray(weight[order], dtype=np.float64)
        counts = np.bincount(self.src, minlength=self.num_nodes)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for arr in (self.src, self.dst, self.weight, self.indptr):
            arr.setflags(write=False)

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[tuple[int, int, float]]) -> "Snapshot":
        """Build from undirected (u, v, w) triples; repeated pairs are summed in either orientation."""
        acc: dict[tuple[int, int], float] = defaultdict(float)
        for u, v, w in edges:
            u, v, w = int(u), int(v), float(w)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not w > 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive weight {w}")
            for x in (u, v):
                if not 0 <= x < num_nodes:
                    raise NodeRangeError(f"node {x} outside [0, {num_nodes})")
            acc[(min(u, v), max(u, v))] += w
        if not acc:
            return cls.empty(num_nodes)
        pairs = np.array(list(acc.keys()), dtype=np.int64)
        weights = np.array(list(acc.values()), dtype=np.float64)
        return cls(
            num_nodes,
            np.concatenate([pairs[:, 0], pairs[:, 1]]),
            np.concatenate([pairs[:, 1], pairs[:, 0]]),
            np.concatenate([weights, weights]),
        )

    @classmethod
    def empty(cls, num_nodes: int) -> "Snapshot":
        none = np.zeros(0, dtype=np.int64)
        return cls(num_nodes, none, none, np.zeros(0))

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.src) // 2

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        """Directed view: every undirected edge appears once per orientation."""
        return [(int(u), int(v), float(w)) for u, v, w in zip(self.src, self.dst, self.weight)]

    @cached_property
    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        return {v: list(zip(self.dst[a:b].tolist(), self.weight[a:b].tolist()))
                for v, (a, b) in enumerate(zip(self.indptr[:-1], self.indptr[1:])) if b > a}

    def undirected_edges(self) -> np.ndarray:
        """(m, 2) array of pairs with u < v."""
        keep = self.src < self.dst
        return np.stack([self.src[keep], self.dst[keep]], axis=1)

    def undirected_weights(self) -> np.ndarray:
        return self.weight[self.src < self.dst]

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted ``u * num_nodes + v`` codes of the directed edges, for fast membership tests."""
        return np.sort(self.src * self.num_nodes + self.dst)

    def has_edges(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        keys = np.asarray(u, dtype=np.int64) * self.num_nodes + np.asarray(v, dtype=np.int64)
        if len(self.edge_keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self.edge_keys, keys).clip(max=len(self.edge_keys) - 1)
        return self.edge_keys[pos] == keys

    def neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[v], self.indptr[v + 1]
        return self.dst[a:b], self.weight[a:b]

    @cached_property
    def attention_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(neighbor, target, weight) triples for attention, one self-loop of weight 1 per node."""
        nodes = np.arange(self.num_nodes, dtype=np.int64)
        nbr = np.concatenate([self.dst, nodes])
        tgt = np.concatenate([self.src, nodes])
        w = np.concatenate([self.weight, np.ones(self.num_nodes)])
        return nbr, tgt, w

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (self.num_nodes == other.num_nodes and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst) and np.array_equal(self.weight, other.weight))

    def __repr__(self) -> str:
        return f"Snapshot(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def neighborhood(s: Snapshot, v: int, include_self: bool = False) -> list[tuple[int, float]]:
    if not 0 <= v < s.num_nodes:
        raise NodeRangeError(f"node {v} outside [0, {s.num_nodes})")
    nbr, w = s.neighbors(v)
    out = list(zip(nbr.tolist(), w.tolist()))
    if include_self:
        out.append((v, 1.0))
    return out


class SnapshotSequence(Sequence[Snapshot]):
    def __init__(self, snapshots: Sequence[Snapshot], num_nodes: int):
        snapshots = list(snapshots)
        if not snapshots:
            raise ValueError("a snapshot sequence needs at least one snapshot")
        for s in snapshots:
            if s.num_nodes != num_nodes:
                raise NodeRangeError(f"snapshot over {s.num_nodes} nodes in a {num_nodes}-node sequence")
        self.snapshots = snapshots
        self.num_nodes = int(num_nodes)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[Snapshot]:
        return iter(self.snapshots)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return SnapshotSequence(self.snapshots[key], self.num_nodes)
        return self.snapshots[key]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SnapshotSequence):
            return NotImplemented
        return self.num_nodes == other.num_nodes and self.snapshots == other.snapshots

    def replace(self, t: int, snapshot: Snapshot) -> "SnapshotSequence":
        snaps = list(self.snapshots)
        snaps[t] = snapshot
        return SnapshotSequence(snaps, self.num_nodes)

    def __repr__(self) -> str:
        return f"SnapshotSequence(T={len(self)}, num_nodes={self.num_nodes})"


def load_snapshots(path: str | os.PathLike, num_nodes: int | None = None) -> SnapshotSequence:
    """Read whitespace-separated ``t u v w`` lines; ``#`` starts a comment.

    Repeated ``(t, u, v)`` lines are summed. Missing time indices give empty
    snapshots. When ``num_nodes`` is None it is inferred as max id + 1.
    """
    per_step: dict[int, list[tuple[int, int, float]]] = defaultdict(list)
    max_node = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise GraphFormatError(path, lineno, f"expected 't u v w', got {len(parts)} fields")
            try:
                t, u, v = int(parts[0]), int(parts[1]), int(parts[2])
                w = float(parts[3])
            except ValueError as exc:
                raise GraphFormatError(path, lineno, str(exc)) from None
            if t < 0 or u < 0 or v < 0:
                raise GraphFormatError(path, lineno, "negative index")
            if u == v:
                raise GraphFormatError(path, lineno, f"self-loop on node {u}")
            if not (w > 0 and np.isfinite(w)):
                raise GraphFormatError(path, lineno, f"weight must be positive, got {parts[3]}")
            if num_nodes is not None and max(u, v) >= num_nodes:
                raise NodeRangeError(f"{path}:{lineno}: node {max(u, v)} >= num_nodes {num_nodes}")
            max_node = max(max_node, u, v)
            per_step[t].append((u, v, w))
    if not per_step:
        raise GraphFormatError(path, 0, "no edges")
    n = num_nodes if num_nodes is not None else max_node + 1
    T = max(per_step) + 1
    return SnapshotSequence([Snapshot.from_edges(n, per_step.get(t, ())) for t in range(T)], n)


def save_snapshots(seq: SnapshotSequence, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for t, s in enumerate(seq):
            for (u, v), w in zip(s.undirected_edges(), s.undirected_weights()):
                fh.write(f"{t} {u} {v} {float(w)!r}\n")


def one_hot_features(num_nodes: int) -> np.ndarray:
    return np.eye(num_nodes)


def load_features(path: str | os.PathLike, num_nodes: int) -> np.ndarray:
    """TSV rows ``node x_1 ... x_D``; every node must appear exactly once."""
    rows: dict[int, list[float]] = {}
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                node = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise GraphFormatError(path, lineno, str(exc)) from None
            if not 0 <= node < num_nodes:
                raise NodeRangeError(f"{path}:{lineno}: node {node} outside [0, {num_nodes})")
            if width is None:
                width = len(vals)
            if len(vals) != width or width == 0:
                raise GraphFormatError(path, lineno, f"expected {width} feature columns, got {len(vals)}")
            if node in rows:
                raise GraphFormatError(path, lineno, f"duplicate node {node}")
            rows[node] = vals
    missing = sorted(set(range(num_nodes)) - set(rows))
    if missing:
        raise GraphFormatError(path, 0, f"no features for nodes {missing[:10]}")
    return np.array([rows[i] for i in range(num_nodes)], dtype=np.float64)


def snapshots_from_interactions(
    records: Iterable[tuple[str, str, float]], window_seconds: float
) -> tuple[SnapshotSequence, list[str]]:
    """Bucket timestamped interactions into fixed windows.

    Link weight is the interaction count in the window. Raw node labels are
    mapped to dense ids in order of first appearance; the label list is
    returned alongside the sequence. Self-interactions are dropped.
    """
    recs = sorted(((float(ts), str(u), str(v)) for u, v, ts in records), key=lambda r: r[0])
    if not recs:
        raise ValueError("no interactions")
    ids: dict[str, int] = {}
    start = recs[0][0]
    per_step: dict[int, list[tuple[int, int, float]]] = defaultdict(list)
    for ts, u, v in recs:
        if u == v:
            continue
        a = ids.setdefault(u, len(ids))
        b = ids.setdefault(v, len(ids))
        per_step[int((ts - start) // window_seconds)].append((a, b, 1.0))
    T = max(per_step) + 1 if per_step else 1
    n = max(len(ids), 1)
    seq = SnapshotSequence([Snapshot.from_edges(n, per_step.get(t, ())) for t in range(T)], n)
    return seq, list(ids)
