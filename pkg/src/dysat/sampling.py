"""Random-walk co-occurrence pairs and degree-smoothed negative sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .graph import Snapshot, SnapshotSequence


class EmptyDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    window: int = 10
    negatives_per_positive: int = 10
    smoothing: float = 0.75
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("walks_per_node", "walk_length", "window", "negatives_per_positive"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")


def node_rng(seed: int, step: int, node: int) -> np.random.Generator:
    """Independent stream per (seed, snapshot, start node), so walk order never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, node]))


def random_walks(s: Snapshot, cfg: SamplerConfig, step: int = 0) -> np.ndarray:
    """``[n_walks, walk_length]`` first-order walks, next hop proportional to edge weight.

    Rows are grouped by start node in increasing id order; isolated nodes
    start no walks.
    """
    cum = np.cumsum(s.weight)
    cum0 = np.concatenate([[0.0], cum])
    row_start = cum0[s.indptr[:-1]]
    row_total = cum0[s.indptr[1:]] - row_start
    walks = []
    for v in np.flatnonzero(s.degree):
        rng = node_rng(cfg.seed, step, int(v))
        cur = np.full(cfg.walks_per_node, v, dtype=np.int64)
        walk = np.empty((cfg.walks_per_node, cfg.walk_length), dtype=np.int64)
        walk[:, 0] = cur
        for k in range(1, cfg.walk_length):
            target = row_start[cur] + rng.random(cfg.walks_per_node) * row_total[cur]
            pos = np.searchsorted(cum, target, side="right")
            pos = np.clip(pos, s.indptr[cur], s.indptr[cur + 1] - 1)
            cur = s.dst[pos]
            walk[:, k] = cur
        walks.append(walk)
    if not walks:
        return np.zeros((0, cfg.walk_length), dtype=np.int64)
    return np.concatenate(walks)


def cooccurrence_pairs(walks, window: int) -> np.ndarray:
    """``(center, context)`` rows for every pair of positions at most ``window`` apart."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(walks, np.ndarray) and walks.ndim == 2:
        groups = [walks]
    else:
        groups = [np.asarray(w, dtype=np.int64).reshape(1, -1) for w in walks]
    out = []
    for w in groups:
        L = w.shape[1]
        for d in range(1, min(window, L - 1) + 1):
            a, b = w[:, :-d].reshape(-1), w[:, d:].reshape(-1)
            out.append(np.stack([a, b], axis=1))
            out.append(np.stack([b, a], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out)


def negative_distribution(s: Snapshot, smoothing: float = 0.75) -> np.ndarray:
    """``P(v) ~ degree(v) ** smoothing`` over non-isolated nodes, zero elsewhere."""
    deg = s.degree.astype(np.float64)
    active = deg > 0
    if not active.any():
        raise EmptyDistributionError("snapshot has no edges")
    p = np.zeros_like(deg)
    p[active] = deg[active] ** smoothing
    return p / p.sum()


def sample_negatives(dist: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` i.i.d. draws by CDF inversion; zero-probability nodes are never drawn."""
    cdf = np.cumsum(dist)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(k), side="right").astype(np.int64)


@dataclass
class WalkCorpus:
    """Per-snapshot positive pair multisets, stored as unique pairs with counts."""

    num_nodes: int
    pairs: list[np.ndarray]  # [m, 2] unique (v, u), sorted
    counts: list[np.ndarray]  # [m] multiplicity of each pair
    neg_dists: list[np.ndarray | None]  # None for edgeless snapshots

    def __len__(self) -> int:
        return len(self.pairs)

    def num_positives(self, t: int) -> int:
        return int(self.counts[t].sum())

    def expanded(self, t: int) -> np.ndarray:
        """The multiset written out, one row per occurrence."""
        return np.repeat(self.pairs[t], self.counts[t], axis=0)

    def source_totals(self, t: int) -> np.ndarray:
        """Number of positives per source node at step ``t``."""
        return np.bincount(self.pairs[t][:, 0], weights=self.counts[t], minlength=self.num_nodes).astype(np.int64)

    def to_bytes(self) -> bytes:
        parts = [b"WCRP", struct.pack("<QQ", self.num_nodes, len(self))]
        for pairs, counts, dist in zip(self.pairs, self.counts, self.neg_dists):
            parts.append(struct.pack("<Q", len(pairs)))
            parts.append(pairs.astype("<i8").tobytes())
            parts.append(counts.astype("<i8").tobytes())
            d = np.zeros(self.num_nodes) if dist is None else dist
            parts.append(struct.pack("<?", dist is not None))
            parts.append(d.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WalkCorpus":
        if blob[:4] != b"WCRP":
            raise ValueError("not a walk corpus dump")
        n, T = struct.unpack_from("<QQ", blob, 4)
        off = 20
        pairs, counts, dists = [], [], []
        for _ in range(T):
            (m,) = struct.unpack_from("<Q", blob, off)
            off += 8
            pairs.append(np.frombuffer(blob, "<i8", 2 * m, off).reshape(m, 2).astype(np.int64))
            off += 16 * m
            counts.append(np.frombuffer(blob, "<i8", m, off).astype(np.int64))
            off += 8 * m
            (present,) = struct.unpack_from("<?", blob, off)
            off += 1
            d = np.frombuffer(blob, "<f8", n, off).astype(np.float64)
            off += 8 * n
            dists.append(d if present else None)
        return cls(int(n), pairs, counts, dists)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WalkCorpus":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _aggregate(pairs: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    keys, counts = np.unique(pairs[:, 0] * num_nodes + pairs[:, 1], return_counts=True)
    return np.stack([keys // num_nodes, keys % num_nodes], axis=1), counts.astype(np.int64)


def build_snapshot_corpus(s: Snapshot, cfg: SamplerConfig, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if s.num_edges == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), None
    pairs = cooccurrence_pairs(random_walks(s, cfg, step), cfg.window)
    uniq, counts = _aggregate(pairs, s.num_nodes)
    return uniq, counts, negative_distribution(s, cfg.smoothing)


def build_corpus(seq: SnapshotSequence | list[Snapshot], cfg: SamplerConfig, steps: list[int] | None = None) -> WalkCorpus:
    """Walk corpus for each snapshot; ``steps`` gives the RNG step index of each (default 0..T-1)."""
    snaps = list(seq)
    steps = list(range(len(snaps))) if steps is None else steps
    built = [build_snapshot_corpus(s, cfg, t) for s, t in zip(snaps, steps)]
    return WalkCorpus(snaps[0].num_nodes, [b[0] for b in built], [b[1] for b in built], [b[2] for b in built])
