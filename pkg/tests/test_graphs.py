import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from come.graphs import (DatasetError, DatasetStats, Graph, LongTailSpec, build_splits,
                         corpus_digest, degree_features, generate_motif_corpus, ingest_tu,
                         load_jsonl, make_long_tailed, normalize_edges, save_jsonl,
                         split_balanced, write_tu, zipf_sizes)


def _write(dir, name, lines):
    (dir / f"DS_{name}.txt").write_text("".join(f"{line}\n" for line in lines))


def _tu(dir, edges, indicator, labels, attrs=None):
    _write(dir, "A", edges)
    _write(dir, "graph_indicator", indicator)
    _write(dir, "graph_labels", labels)
    if attrs is not None:
        _write(dir, "node_attributes", attrs)
    return dir


def _toy(y, n=3, gid=0):
    return Graph(n, [(i, i + 1) for i in range(n - 1)], np.eye(n), y, gid=gid)


# ------------------------------------------------------------------ graph


def test_graph_rejects_bad_input():
    with pytest.raises(DatasetError):
        Graph(0, [], np.zeros((0, 1)), 0)
    with pytest.raises(DatasetError, match="attribute rows"):
        Graph(2, [], np.zeros((3, 1)), 0)
    with pytest.raises(DatasetError, match="outside"):
        Graph(2, [(0, 2)], np.zeros((2, 1)), 0)


def test_graph_arrays_are_read_only():
    g = _toy(0)
    with pytest.raises(ValueError):
        g.x[0, 0] = 5.0


def test_normalize_edges_dedupes_and_orients():
    e = normalize_edges([(1, 0), (0, 1), (2, 2), (2, 1)])
    assert e.tolist() == [[0, 1], [1, 2]]


def test_degree_features_cap():
    x = degree_features(np.array([0, 1, 7]), max_degree=3)
    assert x.shape == (3, 4)
    assert x.argmax(axis=1).tolist() == [0, 1, 3]


# -------------------------------------------------------------- TU ingest


def test_ingest_minimal_fixture(tmp_path):
    _tu(tmp_path, ["1, 2", "2, 1"], ["1", "1"], ["5"])
    graphs, stats = ingest_tu(tmp_path)
    assert len(graphs) == 1
    assert graphs[0].n == 2
    assert graphs[0].edges.tolist() == [[0, 1]]
    assert stats.class_sizes == (1,)


def test_ingest_remaps_labels_by_frequency(tmp_path):
    _tu(tmp_path, ["1,2", "3,4", "5,6"], ["1", "1", "2", "2", "3", "3"], ["7", "7", "3"])
    graphs, stats = ingest_tu(tmp_path)
    assert [g.y for g in graphs] == [0, 0, 1]
    assert stats.class_sizes == (2, 1)


def test_ingest_tie_breaks_by_label(tmp_path):
    _tu(tmp_path, ["1,2"], ["1", "1", "2"], ["9", "4"])
    graphs, _ = ingest_tu(tmp_path)
    assert [g.y for g in graphs] == [1, 0]


def test_ingest_node_out_of_range_names_file_and_line(tmp_path):
    _tu(tmp_path, ["5, 1"], ["1", "1", "1", "1"], ["1"])
    with pytest.raises(DatasetError, match=r"DS_A\.txt line 1"):
        ingest_tu(tmp_path)


def test_ingest_edge_spanning_graphs(tmp_path):
    _tu(tmp_path, ["1, 2", "2, 3"], ["1", "1", "2"], ["0", "1"])
    with pytest.raises(DatasetError, match=r"DS_A\.txt line 2.*spans"):
        ingest_tu(tmp_path)


def test_ingest_attribute_count_mismatch(tmp_path):
    _tu(tmp_path, ["1, 2"], ["1", "1"], ["0"], attrs=["0.5, 1.0"])
    with pytest.raises(DatasetError, match="DS_node_attributes.txt line 2"):
        ingest_tu(tmp_path)


def test_ingest_bad_token(tmp_path):
    _tu(tmp_path, ["1, x"], ["1", "1"], ["0"])
    with pytest.raises(DatasetError, match=r"DS_A\.txt line 1"):
        ingest_tu(tmp_path)


def test_ingest_missing_files(tmp_path):
    with pytest.raises(DatasetError, match="missing"):
        ingest_tu(tmp_path)


def test_ingest_degree_features_when_no_attributes(tmp_path):
    _tu(tmp_path, ["1, 2", "1, 3", "2, 1"], ["1", "1", "1"], ["0"])
    (g,), _ = ingest_tu(tmp_path, max_degree=4)
    assert g.x.shape == (3, 5)
    assert g.x.argmax(axis=1).tolist() == [2, 1, 1]


def test_tu_round_trip_is_idempotent(tmp_path):
    corpus = generate_motif_corpus(3, 4, noise=0.1, seed=3)
    write_tu(corpus, tmp_path / "a")
    first, _ = ingest_tu(tmp_path / "a")
    write_tu(first, tmp_path / "b")
    second, _ = ingest_tu(tmp_path / "b")
    assert len(first) == len(second) == len(corpus)
    assert all(a.same_as(b) for a, b in zip(first, second))
    # class sizes are equal, so the frequency remap keeps label order
    assert all(a.same_as(b) for a, b in zip(corpus, first))


def test_jsonl_round_trip(tmp_path):
    corpus = generate_motif_corpus(2, 3, seed=1)
    save_jsonl(corpus, tmp_path / "c.jsonl")
    back = load_jsonl(tmp_path / "c.jsonl")
    assert all(a.same_as(b) for a, b in zip(corpus, back))
    import json
    keys = set(json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0]))
    assert keys == {"n", "edges", "x", "y"}


# ------------------------------------------------------------ long tailing


def test_zipf_reference_sizes():
    assert zipf_sizes(100, 10, 100) == [100, 25, 11, 6, 4, 3, 2, 2, 1, 1]
    assert LongTailSpec(100).exponent(10) == pytest.approx(2.0)


def test_zipf_if_one_is_flat():
    assert zipf_sizes(7, 4, 1) == [7, 7, 7, 7]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(2, 30), st.floats(1, 200))
def test_zipf_monotone_and_ratio(n_head, M, imbalance):
    sizes = zipf_sizes(n_head, M, imbalance)
    assert sizes[0] == n_head
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert min(sizes) >= 1
    # the tail is n_head / IF rounded half-up and floored at one
    assert sizes[-1] == max(int(np.floor(n_head / imbalance + 0.5 + 1e-9)), 1)


def test_make_long_tailed_samples_without_replacement():
    corpus = [_toy(c, gid=c * 100 + i) for c in range(4) for i in range(40)]
    out, stats = make_long_tailed(corpus, LongTailSpec(10, seed=2))
    assert stats.class_sizes == tuple(zipf_sizes(40, 4, 10))
    assert stats.is_long_tailed()
    ids = [g.gid for g in out]
    assert len(ids) == len(set(ids))
    assert np.bincount([g.y for g in out]).tolist() == list(stats.class_sizes)


def test_make_long_tailed_ranks_by_available_size():
    corpus = [_toy(0, gid=i) for i in range(3)] + [_toy(1, gid=10 + i) for i in range(6)]
    out, _ = make_long_tailed(corpus, LongTailSpec(2))
    # original class 1 is larger, so it becomes rank 0
    assert {g.gid for g in out if g.y == 0} <= set(range(10, 16))


def test_make_long_tailed_errors():
    with pytest.raises(DatasetError):
        make_long_tailed([_toy(0)], LongTailSpec(2))
    corpus = [_toy(c) for c in range(2) for _ in range(3)]
    with pytest.raises(DatasetError, match="needs"):
        make_long_tailed(corpus, LongTailSpec(2), n_head=5)


def test_split_balanced_counts_and_disjoint():
    corpus = [_toy(c, gid=c * 10 + i) for c in range(3) for i in range(10)]
    val, test, rest = split_balanced(corpus, 2, 3, seed=4)
    assert (len(val), len(test), len(rest)) == (6, 9, 15)
    assert np.bincount([g.y for g in val]).tolist() == [2, 2, 2]
    assert np.bincount([g.y for g in test]).tolist() == [3, 3, 3]
    ids = [g.gid for g in val + test + rest]
    assert sorted(ids) == sorted(g.gid for g in corpus)
    again = split_balanced(corpus, 2, 3, seed=4)
    assert [g.gid for g in again[0]] == [g.gid for g in val]


def test_split_balanced_short_class_is_named():
    corpus = [_toy(0) for _ in range(10)] + [_toy(1) for _ in range(4)]
    with pytest.raises(DatasetError, match="class 1"):
        split_balanced(corpus, 2, 3)


@pytest.mark.parametrize("seed", range(4))
def test_build_splits_properties(seed):
    corpus = generate_motif_corpus(5, 60, noise=0.1, seed=seed)
    sp = build_splits(corpus, 20, 10, 20, seed=seed, shuffle_classes=True)
    sizes = sp.stats.class_sizes
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert np.bincount([g.y for g in sp.train]).tolist() == list(sizes)
    assert np.bincount([g.y for g in sp.test]).tolist() == [20] * 5
    assert 2 <= sizes[-1] <= 4          # tail size of the shipped preset
    assert not {g.gid for g in sp.train} & {g.gid for g in sp.test + sp.val}
    # the origin map sends each final label back to the generator's class
    by_gid = {g.gid: g.y for g in corpus}
    assert all(sp.meta["origin"][g.y] == by_gid[g.gid] for g in sp.train + sp.test)


def test_dataset_stats():
    s = DatasetStats((20, 8, 1))
    assert s.M == 3 and s.total == 29 and s.imbalance_factor == 20
    assert s.is_long_tailed()
    assert not DatasetStats((2, 3)).is_long_tailed()


# ------------------------------------------------------------ motif corpus


def _has_cycle(g, length):
    A = np.zeros((g.n, g.n))
    A[g.edges[:, 0], g.edges[:, 1]] = A[g.edges[:, 1], g.edges[:, 0]] = 1
    if length == 3:
        return np.trace(A @ A @ A) > 0
    if length == 4:
        P = A @ A
        np.fill_diagonal(P, 0)
        return P.max() >= 2
    raise ValueError(length)


def test_motif_corpus_construction():
    corpus = generate_motif_corpus(2, 5, noise=0.0, seed=0)
    assert len(corpus) == 10
    assert all(_has_cycle(g, 3) for g in corpus if g.y == 0)
    assert all(_has_cycle(g, 4) for g in corpus if g.y == 1)


def test_motif_corpus_deterministic():
    a = generate_motif_corpus(3, 4, noise=0.2, seed=9)
    b = generate_motif_corpus(3, 4, noise=0.2, seed=9)
    assert corpus_digest(a) == corpus_digest(b)
    assert corpus_digest(a) != corpus_digest(generate_motif_corpus(3, 4, noise=0.2, seed=10))
