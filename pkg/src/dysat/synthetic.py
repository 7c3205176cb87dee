"""Generated dynamic graphs with known temporal structure."""

from __future__ import annotations

import numpy as np

from .graph import Snapshot, SnapshotSequence


def alternating_blocks(
    num_nodes: int = 60,
    steps: int = 8,
    intra_p: float = 0.15,
    block_p: float = 0.5,
    seed: int = 0,
) -> SnapshotSequence:
    """Two communities whose cross links come from one of two recurring blocks.

    Nodes split into communities A and B, each cut into thirds. Every
    snapshot redraws sparse links inside each community. Even snapshots add
    dense links between the first thirds of A and B; odd snapshots add them
    between the second thirds instead. The last thirds never link across.
    A single snapshot cannot tell which third will be linked next, but the
    history can, because the pattern repeats with period 2.
    """
    if num_nodes < 6 or num_nodes % 6:
        raise ValueError("num_nodes must be a positive multiple of 6")
    rng = np.random.default_rng(seed)
    half, third = num_nodes // 2, num_nodes // 6
    A = np.arange(half)
    B = np.arange(half, num_nodes)
    blocks = [(A[:third], B[:third]), (A[third: 2 * third], B[third: 2 * third])]
    snaps = []
    for t in range(steps):
        edges = []
        for comm in (A, B):
            u, v = np.triu_indices(len(comm), k=1)
            keep = rng.random(len(u)) < intra_p
            edges += [(comm[a], comm[b], 1.0) for a, b in zip(u[keep], v[keep])]
        left, right = blocks[t % 2]
        hit = rng.random((len(left), len(right))) < block_p
        edges += [(left[i], right[j], 1.0) for i, j in zip(*np.nonzero(hit))]
        snaps.append(Snapshot.from_edges(num_nodes, edges))
    return SnapshotSequence(snaps, num_nodes)
