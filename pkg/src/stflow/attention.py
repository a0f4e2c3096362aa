"""Self-attention with additive logit bias from spatio-temporal priors.

The bias mixes two priors with learnable scalar weights (zero at init, so
attention starts out plain):

  * negated Manhattan distances between grid positions or time steps;
  * negated mean absolute feature differences of auxiliary data
    (e.g. radar backscatter, which is unaffected by clouds).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .tensorops import ShapeError


def manhattan_bias_spatial(n_h: int, n_w: int) -> torch.Tensor:
    """(S, S) matrix of negated Manhattan distances on the row-major grid."""
    if n_h < 1 or n_w < 1:
        raise ValueError(f"grid dims must be positive, got {n_h}x{n_w}")
    rows = torch.arange(n_h).repeat_interleave(n_w)
    cols = torch.arange(n_w).repeat(n_h)
    dist = (rows[:, None] - rows[None, :]).abs() + (cols[:, None] - cols[None, :]).abs()
    return -dist.to(torch.get_default_dtype())


def manhattan_bias_temporal(t: int) -> torch.Tensor:
    """(T, T) matrix of negated absolute index differences."""
    idx = torch.arange(t)
    return -(idx[:, None] - idx[None, :]).abs().to(torch.get_default_dtype())


def downsample_aux(aux: torch.Tensor, patch: tuple[int, int]) -> torch.Tensor:
    """Mean-pool raw auxiliary frames (..., C, H, W) to the token grid."""
    return torch.nn.functional.avg_pool2d(aux.reshape(-1, *aux.shape[-3:]),
                                          patch).reshape(*aux.shape[:-2],
                                                         aux.shape[-2] // patch[0],
                                                         aux.shape[-1] // patch[1])


def aux_bias_spatial(q_stm: torch.Tensor) -> torch.Tensor:
    """Per-frame negated mean-abs feature differences between patches.

    q_stm: (..., T, C, n_h, n_w) already on the token grid.
    Returns (..., T, S, S).
    """
    if not torch.isfinite(q_stm).all():
        raise ValueError("non-finite auxiliary values rejected")
    *lead, t, c, n_h, n_w = q_stm.shape
    flat = q_stm.reshape(*lead, t, c, n_h * n_w)
    diff = (flat.unsqueeze(-1) - flat.unsqueeze(-2)).abs().mean(dim=-3)
    return -diff


def aux_bias_temporal(q_stm: torch.Tensor) -> torch.Tensor:
    """Per-location negated mean-abs feature differences between frames.

    q_stm: (..., T, C, n_h, n_w). Returns (..., S, T, T).
    """
    if not torch.isfinite(q_stm).all():
        raise ValueError("non-finite auxiliary values rejected")
    *lead, t, c, n_h, n_w = q_stm.shape
    # (..., S, C, T)
    flat = q_stm.reshape(*lead, t, c, n_h * n_w).permute(*range(len(lead)), -1, -2, -3)
    diff = (flat.unsqueeze(-1) - flat.unsqueeze(-2)).abs().mean(dim=-3)
    return -diff


class BiasedSelfAttention(nn.Module):
    """Multi-head self-attention with an additive logit bias shared across heads."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, L, d); bias: (L, L) or (B or 1, L, L), added to every head's logits."""
        if x.shape[-1] != self.d:
            raise ShapeError(f"attention width {x.shape[-1]} != {self.d}")
        b, length, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(b, length, self.heads, self.d_k).transpose(1, 2)
        k = k.reshape(b, length, self.heads, self.d_k).transpose(1, 2)
        v = v.reshape(b, length, self.heads, self.d_k).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        if bias is not None:
            if bias.dim() == 2:
                bias = bias.unsqueeze(0)
            if bias.shape[-2:] != (length, length):
                raise ShapeError(
                    f"bias shape {tuple(bias.shape)} incompatible with length {length}")
            scores = scores + bias.unsqueeze(1)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, self.d)
        return self.out(out)


class SpatioTemporalBias(nn.Module):
    """Learnable mix w1 * positional prior + w2 * auxiliary prior (both init 0)."""

    def __init__(self):
        super().__init__()
        self.w_pos = nn.Parameter(torch.zeros(()))
        self.w_aux = nn.Parameter(torch.zeros(()))

    def forward(self, m_pos: torch.Tensor,
                m_aux: torch.Tensor | None) -> torch.Tensor | None:
        if m_aux is None:
            return self.w_pos * m_pos
        return self.w_pos * m_pos + self.w_aux * m_aux


class CrossAttention(nn.Module):
    """Queries from state, keys/values from condition; zero-init output proj.

    Only used by the condition-fusion ablation harness.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, lx, _ = x.shape
        lc = cond.shape[1]
        q = self.q(x).reshape(b, lx, self.heads, self.d_k).transpose(1, 2)
        k, v = self.kv(cond).chunk(2, dim=-1)
        k = k.reshape(b, lc, self.heads, self.d_k).transpose(1, 2)
        v = v.reshape(b, lc, self.heads, self.d_k).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, lx, self.d))
