import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_snapshot
from dysat.graph import Snapshot, SnapshotSequence
from dysat.sampling import (EmptyDistributionError, SamplerConfig, WalkCorpus, build_corpus,
                            cooccurrence_pairs, negative_distribution, random_walks, sample_negatives)


def _within_3_sigma(count, n, p):
    return abs(count - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_single_edge_walks_alternate():
    s = Snapshot.from_edges(3, [(0, 1, 1.0)])
    walks = random_walks(s, SamplerConfig(walks_per_node=3, walk_length=7))
    assert walks.shape == (6, 7)
    for w in walks:
        assert all(w[i] != w[i + 1] for i in range(6))
        assert set(w) <= {0, 1}
    assert 2 not in walks


def test_triangle_next_step_frequencies():
    s = Snapshot.from_edges(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])
    walks = random_walks(s, SamplerConfig(walks_per_node=50_000, walk_length=2, seed=3))
    first = walks[walks[:, 0] == 0][:, 1]
    n = len(first)
    assert _within_3_sigma((first == 1).sum(), n, 0.5)


def test_weighted_star_branch_frequencies():
    s = Snapshot.from_edges(3, [(0, 1, 1.0), (0, 2, 3.0)])
    walks = random_walks(s, SamplerConfig(walks_per_node=100_000, walk_length=2, seed=4))
    nxt = walks[walks[:, 0] == 0][:, 1]
    assert _within_3_sigma((nxt == 2).sum(), len(nxt), 0.75)
    assert _within_3_sigma((nxt == 1).sum(), len(nxt), 0.25)


def test_trailing_isolated_nodes_are_handled():
    s = Snapshot.from_edges(6, [(0, 1, 1.0), (1, 2, 2.0)])
    walks = random_walks(s, SamplerConfig(walks_per_node=200, walk_length=5))
    assert set(np.unique(walks)) <= {0, 1, 2}
    assert set(walks[:, 0]) == {0, 1, 2}


def test_walks_do_not_depend_on_other_start_nodes():
    s1 = Snapshot.from_edges(4, [(0, 1, 1.0), (1, 2, 1.0)])
    s2 = Snapshot.from_edges(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)])
    cfg = SamplerConfig(walks_per_node=2, walk_length=1)
    assert random_walks(s1, cfg).shape[0] == 6 and random_walks(s2, cfg).shape[0] == 8


def test_cooccurrence_enumeration():
    pairs = cooccurrence_pairs([[0, 1, 2]], 1)
    assert sorted(map(tuple, pairs.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    assert len(cooccurrence_pairs([[5]], 3)) == 0
    assert len(cooccurrence_pairs([[0, 1, 2]], 10)) == 6
    with pytest.raises(ValueError):
        cooccurrence_pairs([[0, 1]], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=12), st.integers(1, 5))
def test_cooccurrence_matches_brute_force(walk, window):
    got = sorted(map(tuple, cooccurrence_pairs(np.array([walk]), window).tolist()))
    want = sorted((walk[i], walk[j]) for i in range(len(walk)) for j in range(len(walk))
                  if i != j and abs(i - j) <= window)
    assert got == want


def test_negative_distribution_values():
    two = Snapshot.from_edges(2, [(0, 1, 1.0)])
    np.testing.assert_allclose(negative_distribution(two), [0.5, 0.5])
    path = Snapshot.from_edges(3, [(0, 2, 1.0), (1, 2, 1.0)])
    p = negative_distribution(path, 0.75)
    big = 2 ** 0.75 / (2 + 2 ** 0.75)
    small = 1 / (2 + 2 ** 0.75)
    np.testing.assert_allclose(p, [small, small, big], rtol=0, atol=1e-12)
    np.testing.assert_allclose(p, [0.2716, 0.2716, 0.4568], rtol=0, atol=1e-4)


def test_negative_distribution_support_and_smoothing():
    s = Snapshot.from_edges(5, [(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)])
    p = negative_distribution(s, 0.0)
    np.testing.assert_allclose(p, [0.25, 0.25, 0.25, 0.25, 0.0])
    assert abs(negative_distribution(s).sum() - 1.0) <= 1e-12
    with pytest.raises(EmptyDistributionError):
        negative_distribution(Snapshot.empty(3))


def test_sample_negatives():
    rng = np.random.default_rng(0)
    assert set(sample_negatives(np.array([0, 0, 1.0, 0]), 100, rng)) == {2}
    draws = sample_negatives(np.full(4, 0.25), 100_000, np.random.default_rng(1))
    for v in range(4):
        assert _within_3_sigma((draws == v).sum(), 100_000, 0.25)
    a = sample_negatives(np.full(4, 0.25), 50, np.random.default_rng(7))
    b = sample_negatives(np.full(4, 0.25), 50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_corpus_pairs_are_short_paths(rng):
    s = random_snapshot(rng, 8, 0.3)
    cfg = SamplerConfig(walks_per_node=5, walk_length=10, window=3)
    corpus = build_corpus([s], cfg)
    dist = _hop_distances(s)
    active = s.degree > 0
    for v, u in corpus.pairs[0]:
        assert active[v] and active[u]
        assert dist[v, u] <= 3
    assert np.all(corpus.counts[0] >= 1)
    assert corpus.num_positives(0) == len(cooccurrence_pairs(random_walks(s, cfg), 3))


def _hop_distances(s):
    n = s.num_nodes
    d = np.full((n, n), np.inf)
    for src in range(n):
        d[src, src] = 0
        frontier = [src]
        while frontier:
            nxt = []
            for x in frontier:
                for y in s.neighbors(x)[0]:
                    if d[src, y] == np.inf:
                        d[src, y] = d[src, x] + 1
                        nxt.append(y)
            frontier = nxt
    return d


def test_corpus_is_deterministic_and_serializes(rng, tmp_path):
    seq = SnapshotSequence([random_snapshot(rng, 6), Snapshot.empty(6), random_snapshot(rng, 6)], 6)
    cfg = SamplerConfig(walks_per_node=3, walk_length=6, window=2, seed=11)
    a, b = build_corpus(seq, cfg), build_corpus(seq, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert a.neg_dists[1] is None and a.num_positives(1) == 0
    a.save(tmp_path / "c.bin")
    back = WalkCorpus.load(tmp_path / "c.bin")
    assert back.to_bytes() == a.to_bytes()
    assert build_corpus(seq, SamplerConfig(walks_per_node=3, walk_length=6, window=2, seed=12)).to_bytes() != a.to_bytes()


def test_expanded_matches_counts(rng):
    corpus = build_corpus([random_snapshot(rng, 5)], SamplerConfig(walks_per_node=2, walk_length=5, window=2))
    ex = corpus.expanded(0)
    assert len(ex) == corpus.num_positives(0)
    np.testing.assert_array_equal(corpus.source_totals(0), np.bincount(ex[:, 0], minlength=5))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(walk_length=0)
    with pytest.raises(ValueError):
        SamplerConfig(smoothing=-1)
