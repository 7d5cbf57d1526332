import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lat2seq.lattice import (Arc, EdgeLabeledLattice, Lattice, LatticeError, PLFSyntaxError, Vocabulary,
                             enumerate_node_paths, enumerate_paths, from_json, from_token_sequence,
                             parse_plf, random_edge_lattice, random_lattice, reverse, serialize_plf,
                             to_json, to_node_labeled, topological_order)

DIAMOND = "((('a',0.3,1),('b',0.7,1),),(('c',1.0,1),),)"


@pytest.fixture
def vocab():
    return Vocabulary(["a", "b", "c"])


def edge_paths(ell):
    """Brute-force label paths of an edge-labeled lattice."""
    out = []

    def walk(v, words, p):
        if v == ell.sink:
            out.append((tuple(words), p))
            return
        for a in ell.arcs:
            if a.src == v:
                walk(a.dst, words + [a.word_id], p * a.score)

    walk(ell.source, [], 1.0)
    return out


def same_paths(a, b):
    a = sorted(a)
    b = sorted(b)
    return len(a) == len(b) and all(x[0] == y[0] and math.isclose(x[1], y[1], rel_tol=1e-12)
                                    for x, y in zip(a, b))


# vocabulary

def test_vocab_reserved_ids():
    v = Vocabulary(["x"])
    assert (v.index("<unk>"), v.index("<s>"), v.index("</s>")) == (0, 1, 2)
    assert v.index("x") == 3
    assert v.index("never seen") == v.unk_id


def test_vocab_from_corpus_drops_singletons():
    v = Vocabulary.from_corpus([["a", "a", "b"]])
    assert "a" in v and "b" not in v
    assert v.index("b") == v.unk_id


def test_vocab_empty_corpus():
    with pytest.raises(ValueError):
        Vocabulary.from_corpus([])


def test_vocab_save_load(tmp_path):
    v = Vocabulary(["z", "y", "x"])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


# PLF

def test_parse_single_arc(vocab):
    ell = parse_plf("((('a',1.0,1),),)", vocab)
    assert ell.num_nodes == 2
    assert ell.arcs == (Arc(0, 1, "a", 1.0, vocab.index("a")),)


def test_parse_diamond(vocab):
    ell = parse_plf(DIAMOND, vocab)
    assert ell.num_nodes == 3
    assert [(a.src, a.dst, a.token, a.score) for a in ell.arcs] == [
        (0, 1, "a", 0.3), (0, 1, "b", 0.7), (1, 2, "c", 1.0)]


def test_plf_roundtrip(vocab):
    ell = parse_plf(DIAMOND, vocab)
    again = parse_plf(serialize_plf(ell), vocab)
    assert again == ell


def test_parse_rejects_bad_sum(vocab):
    with pytest.raises(LatticeError, match="sum"):
        parse_plf("((('a',0.3,1),),)", vocab)


def test_parse_lenient_renormalizes(vocab):
    with pytest.warns(UserWarning):
        ell = parse_plf("((('a',0.3,1),('b',0.3,1),),)", vocab, strict=False)
    assert [a.score for a in ell.arcs] == [0.5, 0.5]


def test_parse_errors(vocab):
    with pytest.raises(PLFSyntaxError) as info:
        parse_plf("((('a',1.0,1),)", vocab)
    assert info.value.position is not None
    with pytest.raises(LatticeError, match="escapes"):
        parse_plf("((('a',1.0,2),),)", vocab)
    with pytest.raises(LatticeError, match="non-positive"):
        parse_plf("((('a',0.0,1),('b',1.0,1),),)", vocab)


def test_parse_unknown_word_maps_to_unk(vocab):
    ell = parse_plf("((('zzz',1.0,1),),)", vocab)
    assert ell.arcs[0].word_id == vocab.unk_id


def test_quoting_roundtrip():
    ell = EdgeLabeledLattice(2, (Arc(0, 1, "it's", 1.0),))
    assert parse_plf(serialize_plf(ell)).arcs[0].token == "it's"


# node-labeled lattices

def test_line_graph_chain(vocab):
    lat = to_node_labeled(parse_plf("((('a',1.0,1),),(('b',1.0,1),),(('c',1.0,1),),)", vocab))
    assert lat.words.tolist() == [1, 3, 4, 5, 2]
    assert lat.wf.tolist() == [1.0] * 5
    assert lat.edges.tolist() == [[0, 1], [1, 2], [2, 3], [3, 4]]


def test_line_graph_diamond(vocab):
    ell = parse_plf(DIAMOND, vocab)
    lat = to_node_labeled(ell)
    assert lat.wf.tolist() == [1.0, 0.3, 0.7, 1.0, 1.0]
    assert sorted(map(tuple, lat.edges.tolist())) == [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)]
    assert same_paths(enumerate_paths(lat), edge_paths(ell))


def test_line_graph_empty():
    with pytest.raises(LatticeError):
        to_node_labeled(EdgeLabeledLattice(2, ()))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_line_graph_preserves_weighted_paths(seed, states):
    ell = random_edge_lattice(np.random.default_rng(seed), states, 8, 1)
    paths = edge_paths(ell)
    if len(paths) > 64:
        return
    assert same_paths(enumerate_paths(to_node_labeled(ell)), paths)


def test_from_token_sequence():
    lat = from_token_sequence([7])
    assert lat.num_nodes == 3
    lat = from_token_sequence([3, 4, 5])
    assert lat.words.tolist() == [1, 3, 4, 5, 2]
    assert enumerate_paths(lat) == [((3, 4, 5), 1.0)]
    with pytest.raises(LatticeError):
        from_token_sequence([])


@pytest.mark.parametrize("words,wf,edges,msg", [
    ([1, 3, 2], [1, 1, 1], [(0, 1), (1, 2), (0, 2)], "sum"),
    ([1, 3, 2], [1, 1, 1], [(0, 1), (2, 1)], "order"),
    ([1, 3, 2], [1, 1, 1], [(0, 1), (0, 1), (1, 2)], "duplicate"),
    ([1, 3, 4, 2], [1, 1, 1, 1], [(0, 1), (1, 3), (0, 2)], "successor"),
    ([1, 3, 2], [1, 1.5, 1], [(0, 1), (1, 2)], "0, 1"),
    ([1], [1], [], "at least"),
])
def test_lattice_validation(words, wf, edges, msg):
    with pytest.raises(LatticeError, match=msg):
        Lattice(words, wf, edges)


def test_lattice_is_immutable():
    lat = from_token_sequence([3])
    with pytest.raises(ValueError):
        lat.wf[0] = 0.5


def test_predecessors_and_successors(vocab):
    lat = to_node_labeled(parse_plf(DIAMOND, vocab))
    assert lat.predecessors(3).tolist() == [1, 2]
    assert lat.successors(0).tolist() == [1, 2]
    assert lat.predecessors(0).tolist() == []


# ordering, reversal

def test_topological_order_chain_and_diamond(vocab):
    assert topological_order(from_token_sequence([3, 4])) == [0, 1, 2, 3]
    lat = to_node_labeled(parse_plf(DIAMOND, vocab))
    order = topological_order(lat)
    assert order == [0, 1, 2, 3, 4]
    pos = {v: k for k, v in enumerate(order)}
    assert all(pos[k] < pos[i] for k, i in lat.edges.tolist())


def test_topological_order_ties_and_cycles():
    assert topological_order(4, [(3, 1), (2, 1), (1, 0)]) == [2, 3, 1, 0]
    with pytest.raises(LatticeError, match="cycle"):
        topological_order(3, [(0, 1), (1, 2), (2, 1)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_topological_order_is_linear_extension(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    perm = rng.permutation(n)
    edges = [(int(perm[a]), int(perm[b])) for a in range(n) for b in range(a + 1, n) if rng.random() < 0.4]
    order = topological_order(n, edges)
    assert order == topological_order(n, list(reversed(edges)))
    pos = {v: k for k, v in enumerate(order)}
    assert sorted(order) == list(range(n))
    assert all(pos[k] < pos[i] for k, i in edges)


def test_reverse_chain():
    lat = from_token_sequence([3, 4, 5])
    rev, mapping = reverse(lat)
    assert rev.words.tolist() == [2, 5, 4, 3, 1]
    assert mapping.tolist() == [4, 3, 2, 1, 0]


def test_reverse_diamond_exchanges_degrees(vocab):
    lat = to_node_labeled(parse_plf(DIAMOND, vocab))
    rev, mapping = reverse(lat)
    n = lat.num_nodes
    indeg = np.bincount(lat.edges[:, 1], minlength=n)
    outdeg = np.bincount(lat.edges[:, 0], minlength=n)
    rin = np.bincount(rev.edges[:, 1], minlength=n)
    rout = np.bincount(rev.edges[:, 0], minlength=n)
    assert np.array_equal(rin[mapping], outdeg)
    assert np.array_equal(rout[mapping], indeg)
    assert np.array_equal(rev.words[mapping], lat.words)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_reverse_is_involution(seed):
    lat = random_lattice(np.random.default_rng(seed), 4, 8, 1)
    rev, m1 = reverse(lat)
    back, m2 = reverse(rev)
    assert np.array_equal(m2[m1], np.arange(lat.num_nodes))
    assert np.array_equal(back.words, lat.words)
    assert np.array_equal(back.wf, lat.wf)
    assert np.array_equal(back.edges, lat.edges)
    fwd = sorted(p for p in enumerate_node_paths(lat))
    bwd = sorted(tuple(int(m2[v]) for v in reversed(p)) for p in enumerate_node_paths(rev))
    assert fwd == bwd


# path enumeration

def test_enumerate_paths_diamond(vocab):
    lat = to_node_labeled(parse_plf(DIAMOND, vocab))
    a, b, c = vocab.encode("abc")
    assert sorted(enumerate_paths(lat)) == [((a, c), 0.3), ((b, c), 0.7)]


def test_enumerate_paths_limit():
    ell = random_edge_lattice(np.random.default_rng(0), 8, 6, 3)
    with pytest.raises(LatticeError, match="paths"):
        enumerate_paths(to_node_labeled(ell), max_paths=2)


def test_path_probabilities_sum_to_one():
    rng = np.random.default_rng(123)
    for _ in range(100):
        lat = random_lattice(rng, int(rng.integers(2, 6)), 9, 1)
        total = math.fsum(p for _, p in enumerate_paths(lat))
        assert abs(total - 1.0) < 1e-9


# JSON

def test_json_roundtrip_bit_exact(vocab):
    rng = np.random.default_rng(5)
    v = Vocabulary([f"w{k}" for k in range(20)])
    for _ in range(20):
        lat = random_lattice(rng, 5, 12, 2)
        text = to_json(lat, v)
        back = from_json(text, v)
        assert back == lat
        assert json.loads(text)["nodes"][0]["word"] == "<s>"


def test_json_lenient(vocab):
    doc = {"nodes": [{"id": 0, "word": "<s>", "wf": 1.0}, {"id": 1, "word": "a", "wf": 0.5},
                     {"id": 2, "word": "</s>", "wf": 1.0}], "edges": [[0, 1], [1, 2]]}
    with pytest.raises(LatticeError):
        from_json(doc, vocab)
    with pytest.warns(UserWarning):
        lat = from_json(doc, vocab, strict=False)
    assert lat.wf[1] == 1.0
