"""Deterministic building blocks: GCN layers, dilated GRU cells and per-node MLPs.

All blocks operate on tensors whose last two axes are (nodes, features); any
leading axes (Monte-Carlo samples) broadcast.
"""

from __future__ import annotations

from collections import deque
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ACTIVATIONS",
    "GCNLayer",
    "DilatedGRUCell",
    "MLPBlock",
    "dropout",
    "gcn_forward",
    "dilated_gru_step",
    "drnn_layer_forward",
    "mlp_forward",
]

ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
    "linear": lambda x: x,
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def _check_last_dim(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {tuple(x.shape)}")


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        super().__init__()
        self.activation = activation
        self._act = _activation(activation)
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        nn.init.xavier_uniform_(self.weight)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, norm_adj: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return gcn_forward(self, norm_adj, features)


def gcn_forward(layer: GCNLayer, norm_adj: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """activation(A_hat @ features @ W)."""
    n = features.shape[-2]
    if norm_adj.shape != (n, n):
        raise ValueError(f"normalized adjacency shape {tuple(norm_adj.shape)} does not match {n} nodes")
    _check_last_dim(features, layer.in_dim, "gcn_forward")
    return layer._act(norm_adj @ (features @ layer.weight))


class DilatedGRUCell(nn.Module):
    """GRU cell whose recurrent input is the state ``dilation`` steps back.

    Gates act on the concatenation [h_prev || x]; scale index ``i`` gives
    dilation 2**(i-1).
    """

    def __init__(self, input_dim: int, hidden_dim: int, scale: int = 1):
        super().__init__()
        if scale < 1:
            raise ValueError(f"scale index must be >= 1, got {scale}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.scale = scale
        cat = hidden_dim + input_dim
        self.w_r = nn.Linear(cat, hidden_dim)
        self.w_u = nn.Linear(cat, hidden_dim)
        self.w_h = nn.Linear(cat, hidden_dim)
        for lin in (self.w_r, self.w_u, self.w_h):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def dilation(self) -> int:
        return 2 ** (self.scale - 1)

    def zero_state(self, like: torch.Tensor) -> torch.Tensor:
        return like.new_zeros(like.shape[:-1] + (self.hidden_dim,))

    def forward(self, h_prev: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return dilated_gru_step(self, h_prev, x)


def dilated_gru_step(cell: DilatedGRUCell, h_prev: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _check_last_dim(x, cell.input_dim, "dilated_gru_step input")
    _check_last_dim(h_prev, cell.hidden_dim, "dilated_gru_step state")
    if h_prev.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"state {tuple(h_prev.shape)} and input {tuple(x.shape)} disagree on leading dims")
    hx = torch.cat([h_prev, x], dim=-1)
    r = torch.sigmoid(cell.w_r(hx))
    u = torch.sigmoid(cell.w_u(hx))
    h_tilde = torch.tanh(cell.w_h(torch.cat([r * h_prev, x], dim=-1)))
    return (1.0 - u) * h_prev + u * h_tilde


def drnn_layer_forward(
    cell: DilatedGRUCell,
    inputs: Sequence[torch.Tensor],
    state_buffer: deque | None = None,
    timestamps: Sequence[int] | None = None,
) -> list[torch.Tensor]:
    """Run a dilated recurrent layer over a time-ordered input sequence.

    ``state_buffer`` holds at most ``cell.dilation`` past hidden states
    (oldest first) and is updated in place; missing history reads as zeros.
    """
    if timestamps is not None:
        if len(timestamps) != len(inputs):
            raise ValueError("timestamps and inputs differ in length")
        if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
            raise ValueError(f"timestamps must be strictly increasing, got {list(timestamps)}")
    buf = deque(maxlen=cell.dilation) if state_buffer is None else state_buffer
    outputs = []
    for x in inputs:
        h_prev = buf[0] if len(buf) == cell.dilation else cell.zero_state(x)
        h = dilated_gru_step(cell, h_prev, x)
        buf.append(h)
        outputs.append(h)
    return outputs


class MLPBlock(nn.Module):
    """Row-wise feed-forward stack; dropout acts on the block input only."""

    def __init__(self, dims: Sequence[int], activations: Sequence[str] | str = "relu", dropout_rate: float = 0.0):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLPBlock needs at least an input and an output dimension")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        n_layers = len(dims) - 1
        if isinstance(activations, str):
            activations = [activations] * n_layers
        if len(activations) != n_layers:
            raise ValueError(f"expected {n_layers} activations, got {len(activations)}")
        self.activations = list(activations)
        self._acts = [_activation(a) for a in self.activations]
        self.dropout_rate = dropout_rate
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        for lin in self.linears:
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    @property
    def in_dim(self) -> int:
        return self.linears[0].in_features

    @property
    def out_dim(self) -> int:
        return self.linears[-1].out_features

    def forward(self, x: torch.Tensor, training: bool = False, generator: torch.Generator | None = None):
        return mlp_forward(self, x, training, generator)


def mlp_forward(
    block: MLPBlock, x: torch.Tensor, training: bool = False, generator: torch.Generator | None = None
) -> torch.Tensor:
    _check_last_dim(x, block.in_dim, "mlp_forward")
    x = dropout(x, block.dropout_rate, training, generator)
    for lin, act in zip(block.linears, block._acts):
        x = act(lin(x))
    return x
