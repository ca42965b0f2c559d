import numpy as np
import pytest

from fragmix.encoder import FragmentEncoder, FrameBatch, GraphBaselineEncoder, TokenMeanEncoder, build_encoder
from fragmix.errors import DimensionError, InputError
from fragmix.models import ModelConfig


def test_frame_batch_checks_shapes(rng):
    with pytest.raises(DimensionError):
        FrameBatch(rng.standard_normal((2, 3)))
    with pytest.raises(DimensionError):
        FrameBatch(rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3)))
    with pytest.raises(InputError):
        FrameBatch(rng.standard_normal((2, 3, 4))).require_anchors()


def test_concat_stacks_frames(rng, chain_anchors):
    a = FrameBatch(rng.standard_normal((2, 5, 4)), chain_anchors(2, 5))
    b = FrameBatch(rng.standard_normal((3, 5, 4)), chain_anchors(3, 5, seed=1))
    both = FrameBatch.concat(a, b)
    assert len(both) == 5
    np.testing.assert_array_equal(both.anchors[2:], b.anchors)


def test_fragment_encoder_pools_per_frame(rng, small_config, chain_anchors):
    encoder = FragmentEncoder(small_config, rng)
    batch = FrameBatch(rng.standard_normal((3, 7, 8)), chain_anchors(3, 7))
    out = encoder(batch)
    assert out.shape == (3, 8)
    single = encoder(FrameBatch(batch.tokens[1:2], batch.anchors[1:2]))
    np.testing.assert_allclose(single.data[0], out.data[1], atol=1e-12)


def test_fragment_encoder_is_rigid_motion_invariant(rng, small_config, chain_anchors):
    encoder = FragmentEncoder(small_config, rng)
    tokens = rng.standard_normal((2, 6, 8))
    anchors = chain_anchors(2, 6)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    moved = anchors @ q.T + 5.0
    np.testing.assert_allclose(encoder(FrameBatch(tokens, anchors)).data, encoder(FrameBatch(tokens, moved)).data,
                               atol=1e-10)


def test_encoder_checks_width(rng, small_config, chain_anchors):
    encoder = FragmentEncoder(small_config, rng)
    with pytest.raises(DimensionError):
        encoder(FrameBatch(rng.standard_normal((1, 4, 6)), chain_anchors(1, 4)))


def test_graph_baseline_and_mean(rng, small_config, chain_anchors):
    batch = FrameBatch(rng.standard_normal((2, 5, 8)), chain_anchors(2, 5))
    gnn = GraphBaselineEncoder(small_config, rng)
    assert len(gnn.layers) == small_config.gnn_layers
    assert gnn(batch).shape == (2, 8)
    np.testing.assert_allclose(TokenMeanEncoder()(batch).data, batch.tokens.mean(axis=1))


@pytest.mark.parametrize("kind,cls", [("tmm", FragmentEncoder), ("gnn", GraphBaselineEncoder),
                                      ("mean", TokenMeanEncoder)])
def test_build_encoder(rng, kind, cls):
    config = ModelConfig(hidden_dim=8, n_heads=2, encoder=kind)
    assert isinstance(build_encoder(config, rng), cls)
