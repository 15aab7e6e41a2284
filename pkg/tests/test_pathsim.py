import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from corpus import AP, APC, random_hin, symmetric_metapaths
from hinsim.hin import GraphError, build_graph, parse_metapath, synth_graph, NetworkSchema
from hinsim.pathsim import (
    CountOverflowError,
    PathSimEngine,
    checked_matmul,
    commuting_matrix,
    count_paths_bruteforce,
    count_paths_bruteforce_row,
    pathsim,
    pathsim_row,
    topk_search,
)

A1, A2 = 0, 1


@pytest.fixture
def apa():
    return parse_metapath("A-P-A", AP)


def test_g0_bruteforce_counts(G0, apa):
    assert count_paths_bruteforce(G0, apa, A1, A1) == 2
    assert count_paths_bruteforce(G0, apa, A1, A2) == 1
    assert count_paths_bruteforce(G0, apa, A2, A1) == 1
    assert count_paths_bruteforce(G0, apa, A2, A2) == 1


def test_g0_commuting_matrix(G0, apa):
    m = commuting_matrix(G0, apa)
    assert m.to_dense().tolist() == [[2, 1], [1, 1]]
    assert m.values.dtype == np.uint64


def test_length_two_matrix_is_biadjacency(G0):
    m = commuting_matrix(G0, parse_metapath("A-P", AP))
    assert m.to_dense().tolist() == [[1, 1], [1, 0]]


def test_restricted_rows(G0, apa):
    m = commuting_matrix(G0, apa, restrict_rows=[A2])
    assert m.row_nodes.tolist() == [A2]
    assert m.to_dense().tolist() == [[1, 1]]


def test_type_mismatch(G0, apa):
    with pytest.raises(GraphError):
        count_paths_bruteforce(G0, apa, 2, A1)
    with pytest.raises(GraphError):
        pathsim(G0, apa, A1, 3)


def test_g0_pathsim(G0, apa):
    assert pathsim(G0, apa, A1, A2) == pytest.approx(2 / 3, abs=1e-15)
    assert pathsim(G0, apa, A1, A1) == 1.0
    assert pathsim(G0, apa, A2, A1) == pathsim(G0, apa, A1, A2)


def test_isolated_nodes():
    g = build_graph(AP, [0, 0, 1], [(0, 2, 0)])
    p = parse_metapath("A-P-A", AP)
    assert pathsim(g, p, 1, 1) == 0.0
    assert pathsim(g, p, 0, 1) == 0.0
    assert pathsim_row(g, p, 1) == {}
    assert count_paths_bruteforce(g, p, 1, 1) == 0
    assert PathSimEngine(g, p).zero_visibility(1)


def test_asymmetric_rejected(G0):
    with pytest.raises(GraphError, match="symmetric"):
        pathsim(G0, parse_metapath("A-P", AP), A1, A1)


def test_g0_row(G0, apa):
    row = pathsim_row(G0, apa, A1)
    assert row == {A1: 1.0, A2: pytest.approx(0.6666666666666666, abs=1e-15)}
    for y, s in row.items():
        assert s == pathsim(G0, apa, A1, y)


def test_g0_topk(G0, apa):
    r = topk_search(G0, apa, A1, k=1)
    assert r.entries == ((A2, pytest.approx(2 / 3)),)
    assert len(topk_search(G0, apa, A1, k=5)) == 1
    with_self = topk_search(G0, apa, A1, k=5, include_self=True)
    assert with_self.entries[0] == (A1, 1.0)
    with pytest.raises(ValueError):
        topk_search(G0, apa, A1, k=0)


def test_topk_ties_by_node_id():
    # a0 shares one paper with each of a1..a3, all with identical visibility
    g = build_graph(AP, [0, 0, 0, 0, 1, 1, 1], [(0, 4, 0), (1, 4, 0), (0, 5, 0), (2, 5, 0), (0, 6, 0), (3, 6, 0)])
    p = parse_metapath("A-P-A", AP)
    r = topk_search(g, p, 0, k=3)
    assert r.nodes() == [1, 2, 3]
    assert topk_search(g, p, 0, k=3) == r


def test_topk_scores_nonincreasing_and_typed():
    g = random_hin(5)
    for p in symmetric_metapaths(g.schema):
        for x in g.nodes_of_type(p.anchor)[:3]:
            r = topk_search(g, p, int(x), k=10)
            scores = [s for _, s in r.entries]
            assert scores == sorted(scores, reverse=True)
            assert all(g.node_types[n] == p.anchor for n in r.nodes())


@pytest.mark.parametrize("seed", range(8))
def test_commuting_matrix_matches_dfs(seed):
    g = random_hin(seed)
    for p in symmetric_metapaths(g.schema, 5):
        m = commuting_matrix(g, p).to_dense()
        for i, x in enumerate(g.nodes_of_type(p.anchor)):
            counts = count_paths_bruteforce_row(g, p, int(x))
            expect = [counts.get(int(y), 0) for y in g.nodes_of_type(p.anchor)]
            assert m[i].tolist() == expect


def test_nonsymmetric_chain_matches_dfs():
    g = synth_graph(APC, {"A": 10, "P": 20, "C": 4}, {"AP": 30, "PC": 20}, seed=1)
    p = parse_metapath("A-P-C", APC)
    m = commuting_matrix(g, p).to_dense()
    for i, x in enumerate(g.nodes_of_type(0)):
        row = count_paths_bruteforce_row(g, p, int(x))
        assert m[i].tolist() == [row.get(int(y), 0) for y in g.nodes_of_type(2)]


def test_synth_a10_p20_oracle():
    g = synth_graph(AP, {"A": 10, "P": 20}, {"AP": 30}, seed=1)
    p = parse_metapath("A-P-A", AP)
    m = commuting_matrix(g, p)
    anchors = g.nodes_of_type(0)
    for i, x in enumerate(anchors):
        for j, y in enumerate(anchors):
            assert m.get(i, j) == count_paths_bruteforce(g, p, int(x), int(y))


def test_odd_length_palindrome_through_same_type_edge():
    schema = NetworkSchema.from_names(["A", "P"], [("AP", "A", "P"), ("PP", "P", "P")])
    g = synth_graph(schema, {"A": 6, "P": 8}, {"AP": 12, "PP": 9}, seed=4)
    p = parse_metapath("A-P-P-A", schema)
    assert p.is_symmetric() and p.length == 3
    m = commuting_matrix(g, p).to_dense()
    for i, x in enumerate(g.nodes_of_type(0)):
        row = count_paths_bruteforce_row(g, p, int(x))
        assert m[i].tolist() == [row.get(int(y), 0) for y in g.nodes_of_type(0)]


def test_odd_length_path_is_not_psd():
    # x on p1, y on p2, p1-p2 cited: one x-p1-p2-y instance but no closed walk of that shape
    schema = NetworkSchema.from_names(["A", "P"], [("AP", "A", "P"), ("PP", "P", "P")])
    g = build_graph(schema, [0, 0, 1, 1], [(0, 2, 0), (1, 3, 0), (2, 3, 1)])
    p = parse_metapath("A-P-P-A", schema)
    m = commuting_matrix(g, p).to_dense()
    assert m.tolist() == [[0, 1], [1, 0]]
    assert 2 * m[0, 1] > m[0, 0] + m[1, 1]
    assert pathsim(g, p, 0, 1) == 0.0


def test_checked_matmul_overflow():
    big = sp.csr_matrix(np.array([[2**63]], dtype=np.uint64))
    two = sp.csr_matrix(np.array([[2]], dtype=np.uint64))
    with pytest.raises(CountOverflowError):
        checked_matmul(big, two)


def test_checked_matmul_at_limit_is_exact():
    a = sp.csr_matrix(np.array([[2**32 - 1]], dtype=np.uint64))
    b = sp.csr_matrix(np.array([[2**32 + 1]], dtype=np.uint64))
    assert int(checked_matmul(a, b).toarray()[0, 0]) == 2**64 - 1
    c = sp.csr_matrix(np.array([[2**32 - 1, 1]], dtype=np.uint64))
    d = sp.csr_matrix(np.array([[2**32 + 1], [1]], dtype=np.uint64))
    with pytest.raises(CountOverflowError):
        checked_matmul(c, d)


def test_overflowing_graph_counts():
    # two authors sharing n papers: r rounds of A-P-A give n^r * 2^(r-1) paths a0 -> a1
    n = 100
    g = build_graph(AP, [0] * 2 + [1] * n, [(a, 2 + i, 0) for a in (0, 1) for i in range(n)])
    p = parse_metapath("-".join(["A", "P"] * 3 + ["A"]), AP)
    assert commuting_matrix(g, p).get(0, 1) == n**3 * 2**2
    p_long = parse_metapath("-".join(["A", "P"] * 10 + ["A"]), AP)
    with pytest.raises(CountOverflowError):
        commuting_matrix(g, p_long)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_pathsim_properties(seed):
    g = random_hin(seed, max_nodes=30)
    for p in symmetric_metapaths(g.schema, 5):
        eng = PathSimEngine(g, p)
        m = commuting_matrix(g, p).to_dense().astype(object)
        s = np.array([eng.dense_row(int(x)) for x in eng.nodes])
        assert np.array_equal(s, s.T)
        assert ((s >= 0.0) & (s <= 1.0)).all()
        diag = m.diagonal()
        assert (2 * m <= diag[:, None] + diag[None, :]).all()
        assert (s.diagonal()[diag > 0] == 1.0).all()
        for j, x in enumerate(eng.nodes[:3]):
            assert eng.score(int(x), int(eng.nodes[-1])) == s[j, -1]
