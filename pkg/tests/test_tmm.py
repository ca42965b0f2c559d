import math

import numpy as np
import pytest

from fragmix import tensor_core as tc
from fragmix.errors import ConfigError, GraphError, InputError
from fragmix.geometry import RadiusGraph, radius_graph
from fragmix.models import GraphOperatorKind, ModelConfig
from fragmix.tmm import (GraphOperatorParams, TmmParams, TokenMergingModule, fragment_count, graph_conv,
                         merge_tokens, positional_encoding, positional_table)


def _graph(pairs, n):
    edges = [(i, j) for i, j in pairs] + [(j, i) for i, j in pairs]
    return RadiusGraph(np.array(edges, dtype=np.int64).reshape(-1, 2), 1.0, n)


def _unit_weights(kind, hops=2, gate_zero=False):
    params = GraphOperatorParams(1, kind, np.random.default_rng(0), tag_hops=hops)
    for k in range(len(params.weights)):
        params.W(k).weight.data[...] = 0.0 if gate_zero and k >= 2 else 1.0
    return params


def test_gc_sums_neighbours():
    out = graph_conv(np.array([[1.0], [2.0], [3.0]]), _graph([(0, 1), (1, 2)], 3), _unit_weights(GraphOperatorKind.GC))
    np.testing.assert_allclose(out.data.ravel(), [3.0, 6.0, 5.0])


def test_gcn_normalises_by_degree():
    out = graph_conv(np.array([[2.0], [4.0]]), _graph([(0, 1)], 2), _unit_weights(GraphOperatorKind.GCN))
    np.testing.assert_allclose(out.data.ravel(), [3.0, 3.0])


def test_rggc_half_gate():
    params = _unit_weights(GraphOperatorKind.RGGC, gate_zero=True)
    out = graph_conv(np.array([[0.0], [2.0], [4.0]]), _graph([(0, 1), (0, 2)], 3), params)
    assert out.data[0, 0] == pytest.approx(3.0)
    assert out.data[1, 0] == pytest.approx(2.0)


@pytest.mark.parametrize("hops", [1, 2, 3])
def test_tag_matches_dense_powers(rng, hops):
    points = rng.uniform(0, 4, size=(6, 3))
    graph = radius_graph(points, 3.0)
    params = GraphOperatorParams(4, GraphOperatorKind.TAG, rng, tag_hops=hops)
    x = rng.standard_normal((6, 4))
    adjacency = np.zeros((6, 6))
    adjacency[graph.src, graph.dst] = 1.0
    degree = adjacency.sum(axis=1)
    with np.errstate(divide="ignore"):
        scale = np.where(degree > 0, 1.0 / np.sqrt(degree), 0.0)
    t = scale[:, None] * adjacency * scale[None, :]
    expected = x @ params.W(0).weight.data + params.W(0).bias.data
    for k in range(1, hops + 1):
        expected += np.linalg.matrix_power(t, k) @ x @ params.W(k).weight.data
    np.testing.assert_allclose(graph_conv(x, graph, params).data, expected, atol=1e-12)


@pytest.mark.parametrize("kind", list(GraphOperatorKind))
def test_empty_graph_keeps_self_term(rng, kind):
    params = GraphOperatorParams(3, kind, rng)
    x = rng.standard_normal((4, 3))
    empty = RadiusGraph(np.zeros((0, 2), dtype=np.int64), 1.0, 4)
    expected = x @ params.W(0).weight.data + params.W(0).bias.data
    np.testing.assert_allclose(graph_conv(x, empty, params).data, expected, atol=1e-12)


def test_graph_size_mismatch(rng):
    params = GraphOperatorParams(2, GraphOperatorKind.GC, rng)
    with pytest.raises(GraphError):
        graph_conv(np.zeros((3, 2)), _graph([(0, 1)], 2), params)


def test_tag_needs_a_hop():
    with pytest.raises(ConfigError):
        GraphOperatorParams(2, GraphOperatorKind.TAG, np.random.default_rng(0), tag_hops=0)


def test_fragment_count_exhaustive():
    for n in range(1, 41):
        for w in range(1, 9):
            for n_lig in range(0, min(n, 4)):
                assert fragment_count(n, w, n_lig) == math.ceil((n - n_lig) / w) + n_lig
    assert fragment_count(214, 6) == 36
    assert fragment_count(214, 6) ** 2 == 1296


def test_merge_pads_last_window(rng):
    params = TmmParams(3, 2, GraphOperatorKind.GC, rng)
    x = rng.standard_normal((5, 3))
    out = merge_tokens(x, 2, None, params)
    assert out.shape == (3, 3)
    padded = np.concatenate([x[4], np.zeros(3)])[None]
    np.testing.assert_allclose(out.data[2], params.merge_mlp(padded).data[0])
    np.testing.assert_allclose(out.data[0], params.merge_mlp(x[:2].reshape(1, 6)).data[0])


def test_merge_window_one_maps_each_token(rng):
    params = TmmParams(4, 1, GraphOperatorKind.GC, rng)
    x = rng.standard_normal((6, 4))
    np.testing.assert_allclose(merge_tokens(x, 1, None, params).data, params.merge_mlp(x).data)


def test_ligands_get_their_own_windows(rng):
    params = TmmParams(2, 3, GraphOperatorKind.GC, rng)
    x = rng.standard_normal((7, 2))
    mask = np.array([False] * 5 + [True, True])
    out = merge_tokens(x, 3, mask, params)
    assert out.shape == (fragment_count(7, 3, 2), 2) == (4, 2)
    lone = np.concatenate([x[6], np.zeros(4)])[None]
    np.testing.assert_allclose(out.data[3], params.merge_mlp(lone).data[0])


def test_ligands_must_trail(rng):
    params = TmmParams(2, 2, GraphOperatorKind.GC, rng)
    with pytest.raises(InputError):
        merge_tokens(np.zeros((4, 2)), 2, np.array([True, False, False, False]), params)


def test_zero_window_rejected(rng):
    with pytest.raises(ConfigError):
        TmmParams(2, 0, GraphOperatorKind.GC, rng)


def test_positional_table_values():
    table = positional_table(50, 8)
    np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(table[:, 0], np.sin(np.arange(50)))
    assert np.all(np.abs(table) <= 1.0)
    with pytest.raises(ConfigError):
        positional_table(3, 5)


def test_positional_encoding_adds_table(rng):
    x = rng.standard_normal((2, 4, 6))
    np.testing.assert_allclose(positional_encoding(x).data, x + positional_table(4, 6))


def test_module_gradient(rng, chain_anchors):
    from fragmix.geometry import batch_radius_graph
    config = ModelConfig(hidden_dim=4, n_heads=1, window=2, operator="rggc", dropout=0.0, cutoff=6.0)
    module = TokenMergingModule(config, rng)
    graph = batch_radius_graph(chain_anchors(2, 5), config.cutoff)
    x = rng.standard_normal((2, 5, 4))
    assert tc.gradcheck(lambda t: module(t, graph), [x]) < 1e-4
