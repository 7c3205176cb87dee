import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dysat.graph import Snapshot, SnapshotSequence  # noqa: E402
from dysat.layers import ModelConfig  # noqa: E402


def random_snapshot(rng, n, p=0.5, weighted=True):
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p:
                edges.append((u, v, float(rng.uniform(0.5, 2.0)) if weighted else 1.0))
    return Snapshot.from_edges(n, edges)


def random_sequence(rng, n, T, p=0.5, weighted=True):
    return SnapshotSequence([random_snapshot(rng, n, p, weighted) for _ in range(T)], n)


def tiny_config(n, T, **kw):
    base = dict(input_dim=n, structural_heads=[2], structural_sizes=[4], temporal_heads=[2],
                temporal_sizes=[4], final_dim=3, max_steps=T, structural_dropout=0.0,
                temporal_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
