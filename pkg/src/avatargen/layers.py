"""Small attention building blocks shared by both stages."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head (cross-)attention with pre-normalized queries.

    ``zero_init`` zeroes the output projection so a fresh module contributes
    exactly nothing. ``bias=False`` drops every additive parameter, so an
    all-zero input maps to an all-zero output.
    """

    def __init__(self, dim: int, heads: int = 4, kv_dim: int | None = None, zero_init: bool = False,
                 norm_kv: bool = False, bias: bool = True):
        super().__init__()
        kv_dim = kv_dim or dim
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim, bias=bias)
        self.norm_kv = nn.LayerNorm(kv_dim, bias=bias) if norm_kv else nn.Identity()
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=bias)
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            if bias:
                nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, mask: torch.Tensor | None = None):
        """x: (B, L, D); context: (B, S, kv_dim) or None for self-attention.

        ``mask`` is a boolean (B, S) key mask, True for keys to attend to.
        """
        h = self.norm(x)
        ctx = h if context is None else self.norm_kv(context)
        b, n, d = h.shape
        q = self.to_q(h).view(b, n, self.heads, -1).transpose(1, 2)
        k = self.to_k(ctx).view(b, ctx.shape[1], self.heads, -1).transpose(1, 2)
        v = self.to_v(ctx).view(b, ctx.shape[1], self.heads, -1).transpose(1, 2)
        attn_mask = None if mask is None else mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class MLP(nn.Module):
    def __init__(self, dim: int, mult: int = 4, zero_init: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
