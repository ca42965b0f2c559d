"""
Transformer token mixer over fragment tokens.

Self-attention runs either on the naive path (full M x M weights, used as the
reference and for attention-map capture) or on the blockwise path, which streams
over key blocks with a running row maximum and normaliser and never holds more
than an M x block slice of scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, UnsupportedCombinationError
from .models import ModelConfig
from .nn import Dropout, LayerNorm, Linear, MLP, Module, ModuleList
from .tensor_core import Tensor

# floor applied before taking logs of captured weights
_LOG_FLOOR = 1e-300


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 2 or q.ndim != k.ndim or k.ndim != v.ndim:
        raise DimensionError("attention: q, k, v must share their rank (>= 2)", q.shape, k.shape, v.shape)
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError("attention: leading extents differ", q.shape, k.shape, v.shape)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention: head or key extents differ", q.shape, k.shape, v.shape)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return tc.softmax(tc.matmul(q, tc.swapaxes(k, -1, -2)) * scale, axis=-1)


def attention_naive(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with the full weight matrix materialised"""
    q, k, v = tc.as_tensor(q), tc.as_tensor(k), tc.as_tensor(v)
    _check_qkv(q, k, v)
    return tc.matmul(attention_weights(q, k), v)


def _key_blocks(n_keys: int, block: int) -> Iterator[Tuple[int, slice]]:
    for b, start in enumerate(range(0, n_keys, block)):
        yield b, slice(start, min(start + block, n_keys))


def blockwise_dropout_scale(shape, block: int, rate: float, key: Tuple[int, int, int]) -> np.ndarray:
    """
    Scaled keep mask over full (..., M, n_keys) weights, drawn block by block
    along the key axis with the keys the blockwise path uses
    """
    lead, n_keys = tuple(shape[:-1]), shape[-1]
    masks = [tc.dropout_keep_mask(lead + (cols.stop - cols.start,), rate, *key, block=b)
             for b, cols in _key_blocks(n_keys, block)]
    return np.concatenate(masks, axis=-1) / (1.0 - rate)


def attention_blockwise(q: Tensor, k: Tensor, v: Tensor, block: int, dropout: float = 0.0,
                        key: Optional[Tuple[int, int, int]] = None) -> Tensor:
    """
    Exact softmax attention computed over key blocks. Forward keeps the running
    row maximum and normaliser per query; backward recomputes each block of
    weights from the saved log-normaliser. Dropout masks are regenerated per
    block from the counter-based key, so forward and backward agree.
    """
    if block < 1:
        raise DimensionError(f"block size must be >= 1, got {block}")
    q, k, v = tc.as_tensor(q), tc.as_tensor(k), tc.as_tensor(v)
    _check_qkv(q, k, v)
    if not 0.0 <= dropout < 1.0:
        raise DimensionError(f"dropout rate {dropout} outside [0, 1)")
    scale = 1.0 / math.sqrt(q.shape[-1])
    n_keys = k.shape[-2]
    qd, kd, vd = q.data, k.data, v.data
    keep_scale = 1.0 / (1.0 - dropout)

    def keep(b: int, shape) -> Optional[np.ndarray]:
        if dropout == 0.0:
            return None
        return tc.dropout_keep_mask(shape, dropout, *key, block=b) * keep_scale

    row_max = np.full(qd.shape[:-1], -np.inf)
    normaliser = np.zeros(qd.shape[:-1])
    acc = np.zeros(qd.shape[:-1] + (vd.shape[-1],))
    for b, cols in _key_blocks(n_keys, block):
        scores = (qd @ np.swapaxes(kd[..., cols, :], -1, -2)) * scale
        new_max = np.maximum(row_max, scores.max(axis=-1))
        rescale = np.exp(row_max - new_max)
        weights = np.exp(scores - new_max[..., None])
        normaliser = normaliser * rescale + weights.sum(axis=-1)
        mask = keep(b, weights.shape)
        if mask is not None:
            weights *= mask
        acc = acc * rescale[..., None] + weights @ vd[..., cols, :]
        row_max = new_max
    out = acc / normaliser[..., None]
    log_norm = row_max + np.log(normaliser)

    def backward(g):
        delta = np.sum(g * out, axis=-1)
        dq = np.zeros_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        for b, cols in _key_blocks(n_keys, block):
            kb, vb = kd[..., cols, :], vd[..., cols, :]
            probs = np.exp((qd @ np.swapaxes(kb, -1, -2)) * scale - log_norm[..., None])
            mask = keep(b, probs.shape)
            dropped = probs if mask is None else probs * mask
            dv[..., cols, :] = np.swapaxes(dropped, -1, -2) @ g
            dprobs = g @ np.swapaxes(vb, -1, -2)
            if mask is not None:
                dprobs *= mask
            dscores = probs * (dprobs - delta[..., None]) * scale
            dq += dscores @ kb
            dk[..., cols, :] = np.swapaxes(dscores, -1, -2) @ qd
        return dq, dk, dv

    return tc.record_op(out, (q, k, v), backward, "attention_blockwise")


@dataclass
class AttentionMap:
    """Captured attention weights: one (B, heads, M, M) array per layer"""
    layers: List[np.ndarray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def mean_log_weights(self, select: Optional[np.ndarray] = None) -> np.ndarray:
        """Log-weights averaged over the (selected) samples: (layers, heads, M, M)"""
        stacked = np.stack(self.layers)
        if select is not None:
            stacked = stacked[:, np.asarray(select)]
        return np.log(np.maximum(stacked, _LOG_FLOOR)).mean(axis=1)

    def rows(self, select: Optional[np.ndarray] = None) -> Iterator[Tuple[int, int, int, int, float]]:
        mean_log = self.mean_log_weights(select)
        for layer, head, query, key in np.ndindex(*mean_log.shape):
            yield layer, head, query, key, float(mean_log[layer, head, query, key])


class MultiHeadAttention(Module):
    def __init__(self, hidden: int, n_heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 mode: str = "blockwise", block_size: int = 64):
        super().__init__()
        if hidden % n_heads:
            raise DimensionError(f"{n_heads} heads do not tile width {hidden}")
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.mode = mode
        self.block_size = block_size
        self.query = Linear(hidden, hidden, rng)
        self.key = Linear(hidden, hidden, rng)
        self.value = Linear(hidden, hidden, rng)
        self.output = Linear(hidden, hidden, rng)
        self.weight_dropout = Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        batch, m, _ = x.shape
        return x.reshape(batch, m, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, capture: Optional[List[np.ndarray]] = None) -> Tensor:
        batch, m, hidden = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        if self.mode == "naive":
            weights = attention_weights(q, k)
            if capture is not None:
                capture.append(weights.data.copy())
            rate = self.weight_dropout.rate if self.training else 0.0
            if rate > 0.0:
                weights = weights * blockwise_dropout_scale(weights.shape, self.block_size, rate,
                                                            self.weight_dropout.key())
            context = tc.matmul(weights, v)
        else:
            if capture is not None:
                raise UnsupportedCombinationError("attention maps can only be captured on the naive path")
            rate = self.weight_dropout.rate if self.training else 0.0
            context = attention_blockwise(q, k, v, self.block_size, rate, self.weight_dropout.key())
        return self.output(context.transpose(0, 2, 1, 3).reshape(batch, m, hidden))


class TransformerBlock(Module):
    """Pre-layernorm block: x + Attn(LN(x)), then x + MLP(LN(x))"""

    def __init__(self, hidden: int, n_heads: int, rng: np.random.Generator, dropout: float, mode: str, block_size: int):
        super().__init__()
        self.attn_norm = LayerNorm(hidden)
        self.attention = MultiHeadAttention(hidden, n_heads, rng, dropout, mode, block_size)
        self.mlp_norm = LayerNorm(hidden)
        self.mlp = MLP(hidden, hidden, hidden, rng, n_layers=2, dropout=dropout)

    def forward(self, x: Tensor, capture: Optional[List[np.ndarray]] = None) -> Tensor:
        x = x + self.attention(self.attn_norm(x), capture)
        return x + self.mlp(self.mlp_norm(x))


class MixerParams(Module):
    """Stack of transformer blocks; n_heads * head_dim == H"""

    def __init__(self, hidden: int, n_heads: int, n_layers: int, rng: np.random.Generator, dropout: float = 0.1,
                 attention: str = "blockwise", block_size: int = 64):
        super().__init__()
        self.hidden = hidden
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.dropout = dropout
        self.blocks = ModuleList([TransformerBlock(hidden, n_heads, rng, dropout, attention, block_size)
                                  for _ in range(n_layers)])

    @classmethod
    def from_config(cls, config: ModelConfig, rng: np.random.Generator) -> "MixerParams":
        return cls(config.hidden_dim, config.n_heads, config.n_layers, rng, config.dropout,
                   config.attention, config.block_size)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def set_attention_mode(self, mode: str) -> None:
        for block in self.blocks:
            block.attention.mode = mode

    def zero_output_projections(self) -> None:
        """Make every block an identity map (residual branch outputs 0)"""
        for block in self.blocks:
            for layer in (block.attention.output, block.mlp.output_layer):
                layer.weight.data[...] = 0.0
                layer.bias.data[...] = 0.0


def transformer_forward(x: Tensor, params: MixerParams, capture_attention: bool = False
                        ) -> Tuple[Tensor, Optional[AttentionMap]]:
    """(B, M, H) -> (B, M, H), plus captured attention maps on request"""
    x = tc.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != params.hidden:
        raise DimensionError(f"mixer expects (B, M, {params.hidden})", x.shape)
    maps = None
    capture = None
    if capture_attention:
        if params.training:
            raise UnsupportedCombinationError("attention maps are captured in evaluation mode only")
        if any(block.attention.mode != "naive" for block in params.blocks):
            raise UnsupportedCombinationError("attention maps can only be captured on the naive path")
        maps = AttentionMap()
        capture = maps.layers
    for block in params.blocks:
        x = block(x, capture)
    return x, maps


class TokenMixer(Module):
    """Transformer stack followed by mean pooling over fragments"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.params = MixerParams.from_config(config, rng)

    def forward(self, x: Tensor, capture_attention: bool = False) -> Tuple[Tensor, Optional[AttentionMap]]:
        y, maps = transformer_forward(x, self.params, capture_attention)
        return y.mean(axis=1), maps
