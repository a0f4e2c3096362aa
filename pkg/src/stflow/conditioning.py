"""Condition injection and flow-time modulation.

``ConditionInjector`` derives per-feature affine parameters from condition
features via a convolution and applies them to the group-normalized state
features with an internal residual:

    out = gamma * GN(h) + beta + h

Weights are zero-initialized, so a fresh injector is an exact identity.
``FlowTimeModulation`` maps the flow-time embedding to scale/shift/gate
triples used around each attention sub-layer (DiT-style adaptive LN).
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .tensorops import ShapeError, group_norm

GN_GROUPS = 8


class ConditionInjector(nn.Module):
    """Adaptive condition injection via condition-derived scale and shift.

    kind='spatial' convolves the condition over the (n_h, n_w) grid with a
    2D kernel; kind='temporal' convolves over the frame axis with a 1D
    kernel. Inputs are (batch, d, n_h, n_w) resp. (batch, d, T).
    """

    def __init__(self, d: int, kind: str, kernel: int = 3, groups: int = GN_GROUPS):
        super().__init__()
        if kind not in ("spatial", "temporal"):
            raise ValueError(f"unknown injector kind {kind!r}")
        if d % groups != 0:
            raise ValueError(f"token width {d} must be divisible by {groups} groups")
        self.kind = kind
        self.groups = groups
        conv_cls = nn.Conv2d if kind == "spatial" else nn.Conv1d
        self.conv = conv_cls(d, 2 * d, kernel, padding=kernel // 2)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, h: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        if h.shape != q.shape:
            raise ShapeError(
                f"condition injector: state {tuple(h.shape)} vs condition {tuple(q.shape)}")
        gamma, beta = self.conv(q).chunk(2, dim=1)
        return gamma * group_norm(h, self.groups) + beta + h


class FlowTimeModulation(nn.Module):
    """Per-block linear map from flow-time embedding to (scale, shift, gate).

    The gate slice is zero-initialized so gated branches vanish at init.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.proj = nn.Linear(d, 3 * d)
        with torch.no_grad():
            self.proj.weight[2 * d:].zero_()
            self.proj.bias[2 * d:].zero_()

    def params(self, z_fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """z_fm (..., L, d) -> gamma, beta, alpha, each (..., L, d)."""
        if z_fm.shape[-1] != self.d:
            raise ShapeError(f"flow-time width {z_fm.shape[-1]} != {self.d}")
        return self.proj(z_fm).chunk(3, dim=-1)

    def modulate(self, feature: torch.Tensor,
                 z_fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (gamma * feature + beta, gate); caller owns LN and gating."""
        if feature.shape[-1] != self.d:
            raise ShapeError(f"feature width {feature.shape[-1]} != {self.d}")
        gamma, beta, alpha = self.params(z_fm)
        return gamma * feature + beta, alpha

    forward = params
