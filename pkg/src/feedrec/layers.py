"""Masked attention building blocks shared by the news and user encoders."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.02


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax over positions where ``mask`` is true.

    Rows with no valid position get all-zero weights instead of NaN.
    """
    if mask is None:
        return torch.softmax(logits, dim=dim)
    logits = logits.masked_fill(~mask, float("-inf"))
    peak = logits.amax(dim=dim, keepdim=True)
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak)).detach()
    w = torch.exp(logits - peak) * mask
    denom = w.sum(dim=dim, keepdim=True)
    return w / torch.where(denom > 0, denom, torch.ones_like(denom))


def dot_attention(query: torch.Tensor, rows: torch.Tensor, mask: torch.Tensor | None = None, scale: float = 1.0):
    """``sum_k softmax(scale * query . r_k) r_k`` over the valid rows.

    ``query`` is ``(..., d)`` and ``rows`` is ``(..., n, d)``. An empty set of
    rows pools to the zero vector. Returns the pooled vector and the weights.
    """
    if rows.shape[-2] == 0:
        shape = torch.broadcast_shapes(query.shape[:-1], rows.shape[:-2]) + rows.shape[-1:]
        return rows.new_zeros(shape), rows.new_zeros(shape[:-1] + (0,))
    logits = (rows * query.unsqueeze(-2)).sum(-1) * scale
    weights = masked_softmax(logits, mask)
    return (weights.unsqueeze(-1) * rows).sum(-2), weights


class AdditiveAttention(nn.Module):
    """Pool a sequence with ``q . tanh(W h + b)`` scores."""

    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.proj = nn.Linear(dim, hidden)
        self.query = nn.Parameter(torch.empty(hidden))
        nn.init.normal_(self.proj.weight, std=INIT_STD)
        nn.init.zeros_(self.proj.bias)
        nn.init.normal_(self.query, std=INIT_STD)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        logits = torch.tanh(self.proj(x)) @ self.query
        weights = masked_softmax(logits, mask)
        return (weights.unsqueeze(-1) * x).sum(-2), weights


class TransformerBlock(nn.Module):
    """One Transformer encoder layer with a key-padding mask.

    Pre-norm by default, so the residual stream keeps the scale of its input.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        ff_dim: int | None = None,
        dropout: float = 0.0,
        norm_first: bool = True,
    ):
        super().__init__()
        self.norm_first = norm_first
        if heads * head_dim != dim:
            raise ValueError(f"heads * head_dim must equal dim ({heads} * {head_dim} != {dim})")
        self.heads = heads
        self.head_dim = head_dim
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        ff_dim = ff_dim or dim
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)
        for lin in (self.qkv, self.out, self.ff1, self.ff2):
            nn.init.normal_(lin.weight, std=INIT_STD)
            nn.init.zeros_(lin.bias)

    def attend(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        *lead, n, dim = x.shape
        q, k, v = self.qkv(x).split(dim, dim=-1)

        def split(t):
            return t.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

        q, k, v = split(q), split(k), split(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        key_mask = None if mask is None else mask.unsqueeze(-2).unsqueeze(-2)
        if key_mask is not None:
            key_mask = key_mask.expand_as(logits)
        weights = masked_softmax(logits, key_mask)
        ctx = (weights @ v).transpose(-3, -2).reshape(*lead, n, dim)
        return self.out(ctx)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ff2(self.dropout(F.gelu(self.ff1(x))))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2] == 0:
            return x
        if self.norm_first:
            x = x + self.dropout(self.attend(self.norm1(x), mask))
            return x + self.dropout(self.feed_forward(self.norm2(x)))
        x = self.norm1(x + self.dropout(self.attend(x, mask)))
        return self.norm2(x + self.dropout(self.feed_forward(x)))
