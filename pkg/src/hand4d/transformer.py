"""Pre-LN transformer blocks with rotary positions on self-attention."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rope import rope_1d


class RopeSelfAttention(nn.Module):
    """Multi-head self-attention with per-head 1D rotary positions."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0,
                 rope_base: float = 10000.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.rope_base = rope_base
        self.dropout = dropout
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        b, k, d = x.shape
        qkv = self.qkv(x).reshape(b, k, 3, self.n_heads, self.d_head)
        q, kk, v = qkv.permute(2, 0, 3, 1, 4)            # each (B, H, K, dh)
        q = rope_1d(q, positions, self.rope_base)
        kk = rope_1d(kk, positions, self.rope_base)
        attn = torch.softmax(q @ kk.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        if self.dropout > 0:
            attn = F.dropout(attn, self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(b, k, d)
        return self.out(out)


class CrossAttention(nn.Module):
    """Plain multi-head cross-attention (no positional rotation)."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.dropout = dropout
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, k, d = x.shape
        m = context.shape[1]
        q = self.q_proj(x).reshape(b, k, self.n_heads, self.d_head).transpose(1, 2)
        kk = self.k_proj(context).reshape(b, m, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(context).reshape(b, m, self.n_heads, self.d_head).transpose(1, 2)
        attn = torch.softmax(q @ kk.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        if self.dropout > 0:
            attn = F.dropout(attn, self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(b, k, d)
        return self.out(out)


def _dropout_or_identity(p: float) -> nn.Module:
    return nn.Dropout(p) if p > 0 else nn.Identity()


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ff_dim),
            nn.GELU(),
            _dropout_or_identity(dropout),
            nn.Linear(ff_dim, d_model),
        )

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-LN block: x + attn(LN(x)), then x + ff(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float,
                 rope_base: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = RopeSelfAttention(d_model, n_heads, dropout, rope_base)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim, dropout)
        self.dropout = _dropout_or_identity(dropout)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.ln1(x), positions))
        x = x + self.dropout(self.ff(self.ln2(x)))
        return x


class RopeEncoder(nn.Module):
    """Stack of pre-LN blocks with a final LayerNorm."""

    def __init__(self, d_model: int, n_layers: int, n_heads: int, ff_dim: int,
                 dropout: float = 0.0, rope_base: float = 10000.0):
        super().__init__()
        self.blocks = nn.ModuleList([
            EncoderBlock(d_model, n_heads, ff_dim, dropout, rope_base)
            for _ in range(n_layers)
        ])
        self.final_ln = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        if positions is None:
            positions = torch.arange(x.shape[1], device=x.device)
        for block in self.blocks:
            x = block(x, positions)
        return self.final_ln(x)
