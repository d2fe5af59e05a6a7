"""Dense, layer-norm, attention and feed-forward blocks shared by both models.

Gradients come from torch autograd; ``callikit.nn.gradcheck`` verifies them
against central differences in float64.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F


def uniform_init(shape, fan_in: int, generator: torch.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound


class Dense(nn.Module):
    """``y = x @ W + b`` with ``W`` of shape ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(uniform_init((d_in, d_out), d_in, generator).float())
        self.bias = nn.Parameter(uniform_init((d_out,), d_in, generator).float()) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight.T, self.bias)


def layer_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Per-row standardization with population variance, then affine."""
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[Tensor] = None
) -> tuple[Tensor, Tensor]:
    """Softmax attention over the last two axes.

    ``q``: (..., Lq, d), ``k``/``v``: (..., Lk, d), ``key_mask``: (B, Lk) with
    True for usable keys, broadcast over heads and queries. Masked keys get
    exactly zero weight. When every key of a batch item is masked the output
    rows are zero and that item is flagged in the returned (B,) tensor.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is None:
        w = torch.softmax(scores, dim=-1)
        empty = torch.zeros(q.shape[0], dtype=torch.bool, device=q.device)
        return w @ v, empty
    m = key_mask.bool()
    while m.dim() < scores.dim():
        m = m.unsqueeze(1)
    scores = scores.masked_fill(~m, torch.finfo(scores.dtype).min)
    # a fully masked row softmaxes to uniform weights; multiplying by the mask
    # zeroes them, and leaves partially masked rows untouched (exp underflows to 0)
    w = torch.softmax(scores, dim=-1) * m.to(scores.dtype)
    empty = ~key_mask.bool().any(dim=-1)
    return w @ v, empty


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, generator: torch.Generator, d_kv: Optional[int] = None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"{n_heads} heads do not divide model dim {d_model}")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.d_model = d_model
        self.q = Dense(d_model, d_model, generator)
        self.k = Dense(d_kv, d_model, generator)
        self.v = Dense(d_kv, d_model, generator)
        self.o = Dense(d_model, d_model, generator)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, -1).transpose(1, 2)

    def forward(self, queries: Tensor, keys_values: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        if queries.shape[-1] != self.d_model:
            raise ValueError(f"query dim {queries.shape[-1]} != {self.d_model}")
        if key_mask is not None and key_mask.shape != keys_values.shape[:2]:
            raise ValueError(f"mask shape {tuple(key_mask.shape)} != keys {tuple(keys_values.shape[:2])}")
        B, Lq, _ = queries.shape
        ctx, _ = scaled_dot_attention(
            self._split(self.q(queries)),
            self._split(self.k(keys_values)),
            self._split(self.v(keys_values)),
            key_mask,
        )
        return self.o(ctx.transpose(1, 2).reshape(B, Lq, self.d_model))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, generator: torch.Generator, activation: str = "gelu"):
        super().__init__()
        self.up = Dense(d_model, d_ff, generator)
        self.down = Dense(d_ff, d_model, generator)
        self.act = {"gelu": F.gelu, "relu": F.relu}[activation]

    def forward(self, x: Tensor) -> Tensor:
        return self.down(self.act(self.up(x)))


def sinusoidal_encoding(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


def mse_loss(pred: Tensor, target: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean squared error over entries where ``mask`` is True."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff2 = (pred - target) ** 2
    if mask is None:
        return diff2.mean()
    m = mask.to(pred.dtype).expand_as(pred)
    count = m.sum()
    if count.item() == 0:
        raise ValueError("mse_loss: every entry is masked")
    return (diff2 * m).sum() / count
