import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dysat.graph import (GraphFormatError, NodeRangeError, Snapshot, SnapshotSequence, load_features,
                         load_snapshots, neighborhood, one_hot_features, save_snapshots,
                         snapshots_from_interactions)


def _write(tmp_path, text, name="edges.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_edge_round_trip(tmp_path):
    seq = load_snapshots(_write(tmp_path, "0 0 1 1.0\n"), num_nodes=2)
    assert len(seq) == 1
    assert sorted(seq[0].edges) == [(0, 1, 1.0), (1, 0, 1.0)]


def test_repeated_lines_are_summed(tmp_path):
    seq = load_snapshots(_write(tmp_path, "0 0 1 1.0\n0 1 0 2.0\n"), num_nodes=2)
    assert seq[0].num_edges == 1
    assert seq[0].adjacency == {0: [(1, 3.0)], 1: [(0, 3.0)]}


def test_ten_windows_give_ten_snapshots(tmp_path):
    lines = "".join(f"{t} {t} {t + 1} 1\n" for t in range(10))
    seq = load_snapshots(_write(tmp_path, lines))
    assert len(seq) == 10 and seq.num_nodes == 11


def test_time_gap_yields_empty_snapshot(tmp_path):
    seq = load_snapshots(_write(tmp_path, "0 0 1 1\n# comment\n\n2 1 2 1\n"), num_nodes=3)
    assert len(seq) == 3
    assert seq[1].num_edges == 0


@pytest.mark.parametrize("text,lineno", [
    ("0 0 1\n", 1),
    ("0 0 1 1\n0 0 x 1\n", 2),
    ("0 1 1 1\n", 1),
    ("0 0 1 -1\n", 1),
    ("0 0 1 nan\n", 1),
    ("-1 0 1 1\n", 1),
])
def test_malformed_lines_report_line_number(tmp_path, text, lineno):
    with pytest.raises(GraphFormatError) as exc:
        load_snapshots(_write(tmp_path, text), num_nodes=4)
    assert exc.value.lineno == lineno
    assert f":{lineno}:" in str(exc.value)


def test_node_out_of_range(tmp_path):
    with pytest.raises(NodeRangeError):
        load_snapshots(_write(tmp_path, "0 0 5 1\n"), num_nodes=3)


def test_star_neighborhood():
    s = Snapshot.from_edges(4, [(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)])
    assert len(neighborhood(s, 0)) == 3


def test_isolated_node_gets_self_only():
    s = Snapshot.from_edges(3, [(0, 1, 1.0)])
    assert neighborhood(s, 2, include_self=True) == [(2, 1.0)]


def test_path_neighborhood_weights():
    s = Snapshot.from_edges(3, [(0, 1, 0.5), (1, 2, 2.0)])
    assert sorted(neighborhood(s, 1)) == [(0, 0.5), (2, 2.0)]
    with pytest.raises(NodeRangeError):
        neighborhood(s, 3)


def test_from_edges_rejects_bad_input():
    with pytest.raises(ValueError):
        Snapshot.from_edges(2, [(0, 0, 1.0)])
    with pytest.raises(ValueError):
        Snapshot.from_edges(2, [(0, 1, 0.0)])
    with pytest.raises(NodeRangeError):
        Snapshot.from_edges(2, [(0, 2, 1.0)])


def test_attention_edges_add_one_self_loop_per_node():
    s = Snapshot.from_edges(3, [(0, 1, 2.0)])
    nbr, tgt, w = s.attention_edges
    loops = nbr == tgt
    assert loops.sum() == 3 and np.all(w[loops] == 1.0)
    assert len(nbr) == 2 + 3


def test_has_edges():
    s = Snapshot.from_edges(4, [(0, 1, 1.0), (2, 3, 1.0)])
    assert s.has_edges(np.array([1, 0, 3]), np.array([0, 2, 2])).tolist() == [True, False, True]
    assert not Snapshot.empty(4).has_edges(np.array([0]), np.array([1]))[0]


edge_lists = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 7), st.floats(0.1, 5.0)).filter(lambda e: e[0] != e[1]),
    max_size=25,
)


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_adjacency_symmetric_and_deduplicated(edges):
    s = Snapshot.from_edges(8, edges)
    adj = s.adjacency
    for u, nbrs in adj.items():
        ids = [v for v, _ in nbrs]
        assert len(ids) == len(set(ids))
        for v, w in nbrs:
            assert (u, w) in adj[v]
            assert w > 0
    expected: dict = {}
    for u, v, w in edges:
        key = (min(u, v), max(u, v))
        expected[key] = expected.get(key, 0.0) + w
    got = {(int(u), int(v)): w for (u, v), w in zip(s.undirected_edges(), s.undirected_weights())}
    assert got.keys() == expected.keys()
    for k in got:
        assert got[k] == pytest.approx(expected[k])


@settings(max_examples=30, deadline=None)
@given(st.lists(edge_lists, min_size=1, max_size=4))
def test_save_load_round_trip(tmp_path_factory, steps):
    seq = SnapshotSequence([Snapshot.from_edges(8, e) for e in steps], 8)
    if all(s.num_edges == 0 for s in seq):
        return
    last = max(t for t, s in enumerate(seq) if s.num_edges)
    path = tmp_path_factory.mktemp("rt") / "edges.txt"
    save_snapshots(seq, path)
    back = load_snapshots(path, num_nodes=8)
    assert back == seq[: last + 1]


def test_sequence_checks_node_count():
    with pytest.raises(NodeRangeError):
        SnapshotSequence([Snapshot.empty(3), Snapshot.empty(4)], 3)
    with pytest.raises(ValueError):
        SnapshotSequence([], 3)


def test_sequence_slice_and_replace():
    seq = SnapshotSequence([Snapshot.empty(2), Snapshot.from_edges(2, [(0, 1, 1.0)])], 2)
    assert isinstance(seq[:1], SnapshotSequence) and len(seq[:1]) == 1
    swapped = seq.replace(0, seq[1])
    assert swapped[0] == seq[1] and seq[0].num_edges == 0


def test_features(tmp_path):
    assert np.array_equal(one_hot_features(3), np.eye(3))
    p = _write(tmp_path, "1\t0.5\t1\n0\t2\t3\n", "f.tsv")
    np.testing.assert_array_equal(load_features(p, 2), [[2, 3], [0.5, 1]])
    with pytest.raises(GraphFormatError):
        load_features(_write(tmp_path, "0\t1\n", "g.tsv"), 2)
    with pytest.raises(GraphFormatError):
        load_features(_write(tmp_path, "0\t1\n1\t1\t2\n", "h.tsv"), 2)


def test_interactions_bucketed_by_window():
    recs = [("a", "b", 0.0), ("b", "a", 10.0), ("c", "a", 100.0), ("d", "d", 5.0)]
    seq, labels = snapshots_from_interactions(recs, window_seconds=50.0)
    assert labels[:3] == ["a", "b", "c"]
    assert len(seq) == 3
    assert seq[0].undirected_weights().tolist() == [2.0]
    assert seq[1].num_edges == 0
    assert seq[2].num_edges == 1
