import numpy as np
import pytest

from kvmerge.errors import ShapeError
from kvmerge.matching import fd_matrix
from kvmerge.simulator import (
    DecoderConfig,
    SequenceLayout,
    embed_sequence,
    init_weights,
    layer_forward,
    synthesize_vision,
)
from kvmerge.numerics import SeededStream

SMALL = DecoderConfig(layers=3, heads=2, dim=16, ff_dim=32, seed=11)


def test_config_validation():
    with pytest.raises(ShapeError):
        DecoderConfig(dim=10, heads=4)
    with pytest.raises(ShapeError):
        DecoderConfig(layers=0)


def test_weights_deterministic_and_bounded():
    a, b = init_weights(SMALL), init_weights(SMALL)
    c = init_weights(DecoderConfig(layers=3, heads=2, dim=16, ff_dim=32, seed=12))
    bound = 1 / np.sqrt(16)
    for la, lb, lc in zip(a.layers, b.layers, c.layers):
        for name in ("wq", "wk", "wv", "wo", "w_in", "w_out"):
            assert getattr(la, name).tobytes() == getattr(lb, name).tobytes()
            assert not np.array_equal(getattr(la, name), getattr(lc, name))
            assert np.abs(getattr(la, name)).max() <= bound
    assert a.layers[0].w_in.shape == (16, 32) and a.layers[0].w_out.shape == (32, 16)


def test_single_token_attention_identity():
    w = init_weights(SMALL)
    _, attn = layer_forward(np.ones((1, 16), dtype=np.float32), w, 0)
    assert attn.probs.shape == (2, 1, 1) and np.all(attn.probs == 1.0)


def test_layer_forward_causal_rows_deterministic():
    w = init_weights(SMALL)
    x = np.random.default_rng(3).normal(size=(12, 16)).astype(np.float32)
    h1, attn = layer_forward(x, w, 1)
    h2, _ = layer_forward(x, w, 1)
    assert h1.data.tobytes() == h2.data.tobytes()
    iu = np.triu_indices(12, 1)
    assert np.all(attn.probs[:, iu[0], iu[1]] == 0)
    np.testing.assert_allclose(attn.probs.sum(-1), 1.0, atol=1e-5)


def test_layer_forward_shape_error():
    with pytest.raises(ShapeError):
        layer_forward(np.ones((3, 8), dtype=np.float32), init_weights(SMALL), 0)


def test_quadrant_field_is_locally_similar():
    x, _ = synthesize_vision(4, 4, 16, SeededStream(2))
    fd = fd_matrix(x, x, "cosine")
    quad = np.array([(r >= 2) * 2 + (c >= 2) for r in range(4) for c in range(4)])
    same = quad[:, None] == quad[None, :]
    off_diag = ~np.eye(16, dtype=bool)
    assert fd[same & off_diag].mean() < fd[~same].mean()


def test_embed_sequence_layout_and_file_override():
    cfg = DecoderConfig(layers=1, heads=2, dim=8, ff_dim=8, seed=1)
    layout = SequenceLayout(prompt_pre=2, height=3, width=3, prompt_post=1)
    seq = embed_sequence(layout, cfg)
    assert seq.shape == (12, 8)
    vis = np.arange(72, dtype=np.float32).reshape(3, 3, 8)
    seq2 = embed_sequence(layout, cfg, vis)
    assert np.array_equal(seq2.data[2:11], vis.reshape(9, 8))
    assert np.array_equal(seq2.data[:2], seq.data[:2]) and np.array_equal(seq2.data[11:], seq.data[11:])
    with pytest.raises(ShapeError):
        embed_sequence(layout, cfg, np.zeros((9, 4)))


def test_vision_only_layout():
    cfg = DecoderConfig(layers=1, heads=2, dim=8, ff_dim=8)
    seq = embed_sequence(SequenceLayout(0, 2, 2, 0), cfg)
    assert seq.shape == (4, 8)
