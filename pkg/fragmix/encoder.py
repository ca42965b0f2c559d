"""
Encoders mapping a batch of frames to one pooled H-vector per frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, InputError
from .geometry import batch_radius_graph
from .mixer import AttentionMap, TokenMixer
from .models import GraphOperatorKind, ModelConfig
from .nn import Module, ModuleList
from .tensor_core import Tensor
from .tmm import GraphOperatorParams, TokenMergingModule, graph_conv


@dataclass
class FrameBatch:
    """Residue tokens (B, N, H) with the matching anchor positions (B, N, 3)"""
    tokens: np.ndarray
    anchors: Optional[np.ndarray] = None
    ligand_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 3:
            raise DimensionError("tokens must have shape (B, N, H)", self.tokens.shape)
        if self.anchors is not None:
            self.anchors = np.asarray(self.anchors, dtype=np.float64)
            if self.anchors.shape != self.tokens.shape[:2] + (3,):
                raise DimensionError("anchors must have shape (B, N, 3)", self.anchors.shape, self.tokens.shape)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_residues(self) -> int:
        return self.tokens.shape[1]

    def require_anchors(self) -> np.ndarray:
        if self.anchors is None:
            raise InputError("this encoder needs anchor positions alongside the tokens")
        return self.anchors

    @classmethod
    def concat(cls, first: "FrameBatch", second: "FrameBatch") -> "FrameBatch":
        anchors = None
        if first.anchors is not None and second.anchors is not None:
            anchors = np.concatenate([first.anchors, second.anchors])
        return cls(np.concatenate([first.tokens, second.tokens]), anchors, first.ligand_mask)


class FragmentEncoder(Module):
    """h(X): radius graph, token merging, positional encoding, token mixer, mean pool"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cutoff = config.cutoff
        self.hidden = config.hidden_dim
        self.tmm = TokenMergingModule(config, rng)
        self.mixer = TokenMixer(config, rng)

    def embed(self, batch: FrameBatch, capture_attention: bool = False) -> Tuple[Tensor, Optional[AttentionMap]]:
        if batch.tokens.shape[-1] != self.hidden:
            raise DimensionError(f"encoder expects H={self.hidden}", batch.tokens.shape)
        graph = batch_radius_graph(batch.require_anchors(), self.cutoff)
        fragments = self.tmm(tc.as_tensor(batch.tokens), graph, batch.ligand_mask)
        return self.mixer(fragments, capture_attention)

    def forward(self, batch: FrameBatch) -> Tensor:
        return self.embed(batch)[0]


class GraphBaselineEncoder(Module):
    """Stacked RGGC layers with SiLU between them, then mean pooling; no merging or mixer"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cutoff = config.cutoff
        self.hidden = config.hidden_dim
        self.layers = ModuleList([GraphOperatorParams(config.hidden_dim, GraphOperatorKind.RGGC, rng)
                                  for _ in range(config.gnn_layers)])

    def forward(self, batch: FrameBatch) -> Tensor:
        n_frames, n, hidden = batch.tokens.shape
        if hidden != self.hidden:
            raise DimensionError(f"encoder expects H={self.hidden}", batch.tokens.shape)
        graph = batch_radius_graph(batch.require_anchors(), self.cutoff)
        x = tc.as_tensor(batch.tokens.reshape(n_frames * n, hidden))
        for i, layer in enumerate(self.layers):
            x = graph_conv(x, graph, layer)
            if i < len(self.layers) - 1:
                x = tc.silu(x)
        return x.reshape(n_frames, n, hidden).mean(axis=1)


class TokenMeanEncoder(Module):
    """Average of the residue tokens; carries no parameters"""

    def __init__(self, config: Optional[ModelConfig] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()

    def forward(self, batch: FrameBatch) -> Tensor:
        return tc.as_tensor(batch.tokens).mean(axis=1)


ENCODERS = {"tmm": FragmentEncoder, "gnn": GraphBaselineEncoder, "mean": TokenMeanEncoder}


def build_encoder(config: ModelConfig, rng: np.random.Generator) -> Module:
    return ENCODERS[config.encoder](config, rng)
