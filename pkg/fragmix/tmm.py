"""
Token-merging module: one graph convolution over the residue radius graph,
then a shared MLP that merges windows of w sequential residue tokens into one
fragment token, then sinusoidal positional encoding of the fragments.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, InputError
from .geometry import RadiusGraph
from .models import GraphOperatorKind, ModelConfig
from .nn import Linear, MLP, Module, ModuleList
from .tensor_core import Tensor


def operator_weight_count(kind: GraphOperatorKind, hops: int = 2) -> int:
    if kind is GraphOperatorKind.TAG:
        if hops < 1:
            raise ConfigError("TAG needs K >= 1")
        return hops + 1
    return 4 if kind is GraphOperatorKind.RGGC else 2


class GraphOperatorParams(Module):
    """W_0..W_K of one graph operator"""

    def __init__(self, hidden: int, operator: GraphOperatorKind, rng: np.random.Generator, tag_hops: int = 2):
        super().__init__()
        self.hidden = hidden
        self.operator = GraphOperatorKind(operator)
        self.tag_hops = tag_hops
        count = operator_weight_count(self.operator, tag_hops)
        # only W_0 carries a bias
        self.weights = ModuleList([Linear(hidden, hidden, rng, bias=(k == 0)) for k in range(count)])

    def W(self, k: int) -> Linear:
        return self.weights[k]


class TmmParams(GraphOperatorParams):
    """
    Weights of the merging layer: the graph operator plus the 2-layer SiLU MLP
    mapping w*H -> H
    """

    def __init__(self, hidden: int, window: int, operator: GraphOperatorKind, rng: np.random.Generator,
                 tag_hops: int = 2, dropout: float = 0.0):
        if window < 1:
            raise ConfigError(f"window size must be >= 1, got {window}")
        super().__init__(hidden, operator, rng, tag_hops)
        self.window = window
        self.merge_mlp = MLP(window * hidden, hidden, hidden, rng, n_layers=2, dropout=dropout)


def graph_conv(x: Tensor, graph: RadiusGraph, params: GraphOperatorParams) -> Tensor:
    """Single message-passing update x'_i = W_0 x_i + sum_j alpha_ij W_1 x_j (operator-specific)"""
    x = tc.as_tensor(x)
    n = x.shape[0]
    graph.validate(n)
    i, j = graph.src, graph.dst
    kind = params.operator

    if kind is GraphOperatorKind.GC:
        return params.W(0)(x) + params.W(1)(tc.scatter_add(x[j], i, n))

    if kind is GraphOperatorKind.GCN:
        d_tilde = graph.degree() + 1.0
        coef = 1.0 / np.sqrt(d_tilde[i] * d_tilde[j])
        neighbours = tc.scatter_add(x[j] * coef[:, None], i, n)
        return params.W(0)(x / d_tilde[:, None]) + params.W(1)(neighbours)

    if kind is GraphOperatorKind.RGGC:
        gate = tc.sigmoid(params.W(2)(x)[i] + params.W(3)(x)[j])
        return params.W(0)(x) + tc.scatter_add(gate * params.W(1)(x)[j], i, n)

    # TAG: sum_k W_k T^k x with T = D^-1/2 A D^-1/2
    degree = graph.degree()
    coef = 1.0 / np.sqrt(degree[i] * degree[j]) if graph.n_edges else np.zeros(0)
    out = params.W(0)(x)
    hop = x
    for k in range(1, params.tag_hops + 1):
        hop = tc.scatter_add(hop[j] * coef[:, None], i, n)
        out = out + params.W(k)(hop)
    return out


def fragment_count(n_residues: int, window: int, n_ligand: int = 0) -> int:
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    return math.ceil((n_residues - n_ligand) / window) + n_ligand


def _ligand_split(ligand_mask: Optional[np.ndarray], n: int) -> int:
    if ligand_mask is None:
        return n
    mask = np.asarray(ligand_mask, dtype=bool)
    if mask.shape != (n,):
        raise InputError(f"ligand mask has {mask.size} entries for {n} residues")
    n_poly = n - int(mask.sum())
    if mask[:n_poly].any():
        raise InputError("ligand residues must be contiguous at the end of the sequence")
    return n_poly


def merge_tokens(x: Tensor, window: int, ligand_mask: Optional[np.ndarray], params: TmmParams) -> Tensor:
    """
    (B, N, H) residue tokens -> (B, M, H) fragment tokens, M = ceil(N_poly / w) + N_ligand.
    The last polymer window and every singleton ligand window are zero-padded to w.
    """
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    x = tc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, n, hidden = x.shape
    n_poly = _ligand_split(ligand_mask, n)
    n_lig = n - n_poly

    n_windows = math.ceil(n_poly / window)
    poly = x[:, :n_poly, :]
    pad = n_windows * window - n_poly
    if pad:
        poly = tc.concat([poly, tc.zeros((batch, pad, hidden))], axis=1)
    windows = poly.reshape(batch, n_windows, window * hidden)
    if n_lig:
        ligand = x[:, n_poly:, :]
        if window > 1:
            ligand = tc.concat([ligand, tc.zeros((batch, n_lig, (window - 1) * hidden))], axis=2)
        windows = tc.concat([windows, ligand], axis=1)

    fragments = params.merge_mlp(windows)
    return fragments[0] if squeeze else fragments


def positional_table(n_positions: int, hidden: int) -> np.ndarray:
    if hidden % 2:
        raise ConfigError(f"positional encoding needs an even width, got H={hidden}")
    position = np.arange(n_positions, dtype=np.float64)[:, None]
    angle = position / 10000.0 ** (2.0 * np.arange(hidden // 2) / hidden)
    table = np.empty((n_positions, hidden))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def positional_encoding(x: Tensor) -> Tensor:
    """x + PE over the fragment axis (second to last)"""
    x = tc.as_tensor(x)
    return x + positional_table(x.shape[-2], x.shape[-1])


class TokenMergingModule(Module):
    """Graph convolution, window merging and positional encoding as one layer"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.window = config.window
        self.use_positional_encoding = config.positional_encoding
        self.params = TmmParams(config.hidden_dim, config.window, config.operator, rng,
                                tag_hops=config.tag_hops, dropout=config.dropout)

    def forward(self, tokens: Tensor, graph: RadiusGraph, ligand_mask: Optional[np.ndarray] = None) -> Tensor:
        batch, n, hidden = tokens.shape
        mixed = graph_conv(tokens.reshape(batch * n, hidden), graph, self.params).reshape(batch, n, hidden)
        fragments = merge_tokens(mixed, self.window, ligand_mask, self.params)
        return positional_encoding(fragments) if self.use_positional_encoding else fragments
