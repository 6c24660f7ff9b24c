"""Deterministic toy causal decoder producing hidden states and attention maps.

Weights and synthetic inputs come from splitmix64 streams, so
``(seed, layout, config)`` fixes every tensor. No positional encoding and no
training: the decoder only has to emit valid causal attention distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .grid import balanced_segments
from .guidance import AttentionTensor
from .numerics import Matrix, SeededStream, causal_softmax, stream_uniform_array

RMS_EPS = 1e-6
# Salts separating the weight, embedding and pipeline streams drawn from one seed.
EMBED_SALT = 0xE3B0C44298FC1C14
PIPELINE_SALT = 0x243F6A8885A308D3


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 8
    heads: int = 4
    dim: int = 64
    ff_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "heads", "dim", "ff_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class SequenceLayout:
    prompt_pre: int = 8
    height: int = 16
    width: int = 16
    prompt_post: int = 8

    def __post_init__(self):
        if self.prompt_pre < 0 or self.prompt_post < 0:
            raise ShapeError("prompt lengths must be >= 0")
        if self.height < 1 or self.width < 1:
            raise ShapeError("vision grid must be at least 1x1")

    @property
    def vision_tokens(self) -> int:
        return self.height * self.width

    @property
    def prompt_tokens(self) -> int:
        return self.prompt_pre + self.prompt_post


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class DecoderWeights:
    config: DecoderConfig
    layers: tuple[LayerWeights, ...] = field(repr=False)


def init_weights(config: DecoderConfig) -> DecoderWeights:
    """Draw weights from ``SeededStream(seed)`` in [-1/sqrt(d), 1/sqrt(d)).

    Order per layer: Q, K, V, O (d x d), MLP in (d x d_ff), MLP out (d_ff x d),
    each filled row-major; layers in ascending order.
    """
    d, f = config.dim, config.ff_dim
    bound = 1.0 / np.sqrt(d)
    stream = SeededStream(config.seed)
    layers = []
    for _ in range(config.layers):
        mats = []
        for shape in ((d, d), (d, d), (d, d), (d, d), (d, f), (f, d)):
            vals, stream = stream_uniform_array(stream, shape[0] * shape[1], -bound, bound)
            vals = vals.reshape(shape)
            vals.setflags(write=False)
            mats.append(vals)
        layers.append(LayerWeights(*mats))
    return DecoderWeights(config, tuple(layers))


def rms_normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(np.square(x, dtype=np.float32), axis=-1, keepdims=True))
    return (x / (rms + np.float32(RMS_EPS))).astype(np.float32)


def layer_forward(hidden, weights: DecoderWeights, layer: int) -> tuple[Matrix, AttentionTensor]:
    """One pre-norm block (causal MHA + ReLU MLP, both residual). ``layer`` is 0-based."""
    h = hidden.data if isinstance(hidden, Matrix) else np.asarray(hidden, dtype=np.float32)
    cfg = weights.config
    if h.ndim != 2 or h.shape[1] != cfg.dim:
        raise ShapeError(f"hidden must be (seq, {cfg.dim}), got {h.shape}")
    w = weights.layers[layer]
    n, d, nh = h.shape[0], cfg.dim, cfg.heads
    dh = d // nh

    u = rms_normalize(h)
    q = (u @ w.wq).reshape(n, nh, dh).transpose(1, 0, 2)
    k = (u @ w.wk).reshape(n, nh, dh).transpose(1, 0, 2)
    v = (u @ w.wv).reshape(n, nh, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(dh))
    probs = causal_softmax(scores)
    ctx = (probs @ v).transpose(1, 0, 2).reshape(n, d)
    h = h + ctx @ w.wo

    m = rms_normalize(h)
    h = h + np.maximum(m @ w.w_in, np.float32(0.0)) @ w.w_out
    return Matrix.from_array(h.astype(np.float32)), AttentionTensor(probs)


def synthesize_vision(
    height: int,
    width: int,
    dim: int,
    stream: SeededStream,
    clusters_per_axis: int = 2,
    noise: float = 0.25,
) -> tuple[np.ndarray, SeededStream]:
    """Piecewise-constant prototype field plus noise, shape (height*width, dim).

    The grid is tiled into ``clusters_per_axis``^2 rectangular regions (quadrants
    by default), each with its own prototype, so neighbours are similar.
    """
    k_r = min(clusters_per_axis, height)
    k_c = min(clusters_per_axis, width)
    protos, stream = stream_uniform_array(stream, k_r * k_c * dim, -1.0, 1.0)
    protos = protos.reshape(k_r * k_c, dim)
    eps, stream = stream_uniform_array(stream, height * width * dim, -noise, noise)
    eps = eps.reshape(height * width, dim)
    row_tile = np.repeat(np.arange(k_r), balanced_segments(height, k_r))
    col_tile = np.repeat(np.arange(k_c), balanced_segments(width, k_c))
    tile = (row_tile[:, None] * k_c + col_tile[None, :]).ravel()
    return (protos[tile] + eps).astype(np.float32), stream


def embed_sequence(layout: SequenceLayout, config: DecoderConfig, vision=None) -> Matrix:
    """Rows ordered [pre-prompt | vision grid (row-major) | post-prompt].

    ``vision`` overrides the synthetic field; it must be (h*w, dim) or (h, w, dim).
    """
    stream = SeededStream(config.seed ^ EMBED_SALT)
    d = config.dim
    prompt, stream = stream_uniform_array(stream, layout.prompt_tokens * d, -1.0, 1.0)
    prompt = prompt.reshape(layout.prompt_tokens, d)
    if vision is None:
        vis, stream = synthesize_vision(layout.height, layout.width, d, stream)
    else:
        vis = np.asarray(vision, dtype=np.float32)
        if vis.ndim == 3:
            vis = vis.reshape(-1, vis.shape[-1])
        if vis.shape != (layout.vision_tokens, d):
            raise ShapeError(
                f"vision tensor shape {vis.shape} != ({layout.vision_tokens}, {d})"
            )
    rows = np.concatenate([prompt[: layout.prompt_pre], vis, prompt[layout.prompt_pre :]])
    return Matrix.from_array(rows)
