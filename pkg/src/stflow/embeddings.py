"""Token and metadata embeddings.

Patch tokenization of raw pixel sequences (no latent autoencoder),
sincos positional banks, day-of-year and geographic embeddings, and
flow-time embeddings repeated over the spatial and temporal axes.

Token grids are stored canonically as (T, d, n_h, n_w); the spatial view
(T, S, d) and temporal view (S, T, d) are lossless permutations.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

FLOW_TIME_SCALE = 1000.0
# keeps the historical-condition timestep codes disjoint from flow-time codes
HISTORY_POSITION_OFFSET = 1.0e6


def sincos_positions(positions: torch.Tensor, d: int) -> torch.Tensor:
    """Standard frequency bank evaluated at arbitrary positions.

    Pair k uses angle pos / 10000^(2k/d); channels alternate sin, cos.
    Returns (len(positions), d).
    """
    if d % 2 != 0:
        raise ValueError(f"embedding width {d} must be even")
    positions = positions.to(torch.float64).reshape(-1, 1)
    k = torch.arange(d // 2, dtype=torch.float64)
    inv_freq = torch.pow(10000.0, -2.0 * k / d)
    angles = positions * inv_freq  # (n, d/2)
    out = torch.empty(positions.shape[0], d, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out.to(torch.get_default_dtype())


def sincos_1d(length: int, d: int) -> torch.Tensor:
    return sincos_positions(torch.arange(length, dtype=torch.float64), d)


def sincos_2d(n_h: int, n_w: int, d: int) -> torch.Tensor:
    """2D bank: independent 1D encodings of row (d/2) and column (d/2), concatenated."""
    if d % 4 != 0:
        raise ValueError(f"embedding width {d} must be divisible by 4 for 2D sincos")
    rows = torch.arange(n_h, dtype=torch.float64).repeat_interleave(n_w)
    cols = torch.arange(n_w, dtype=torch.float64).repeat(n_h)
    return torch.cat([sincos_positions(rows, d // 2),
                      sincos_positions(cols, d // 2)], dim=1)


def embed_doy(doys, d: int) -> torch.Tensor:
    """Sincos embedding at absolute day-of-year positions (irregular intervals)."""
    doys = torch.as_tensor(doys)
    if ((doys < 1) | (doys > 366)).any():
        raise ValueError(f"day-of-year values must lie in [1, 366], got {doys.tolist()}")
    return sincos_positions(doys.to(torch.float64), d)


def embed_lonlat(lonlat, d: int, rff_seed: int = 0) -> torch.Tensor:
    """Geographic embedding: random Fourier features + fixed sincos, concatenated.

    First d/2 channels are cos/sin of seeded Gaussian projections of
    (lon, lat) in radians; last d/2 channels are fixed sincos banks of
    lon and lat separately. Deterministic given rff_seed.
    """
    if d % 8 != 0:
        raise ValueError(f"embedding width {d} must be divisible by 8 for lon/lat")
    lon, lat = float(lonlat[0]), float(lonlat[1])
    if not (-180.0 <= lon <= 180.0):
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not (-90.0 <= lat <= 90.0):
        raise ValueError(f"latitude {lat} outside [-90, 90]")
    g = torch.Generator()
    g.manual_seed(int(rff_seed))
    freqs = torch.randn(d // 4, 2, generator=g, dtype=torch.float64)
    v = torch.tensor([lon, lat], dtype=torch.float64) * math.pi / 180.0
    proj = freqs @ v
    rff = torch.cat([torch.cos(proj), torch.sin(proj)])
    fixed = torch.cat([sincos_positions(torch.tensor([lon]), d // 4)[0],
                       sincos_positions(torch.tensor([lat]), d // 4)[0]])
    return torch.cat([rff.to(torch.get_default_dtype()), fixed])


class FlowTimeEmbeds:
    """Flow-time embedding and its spatial/temporal repeats."""

    def __init__(self, base: torch.Tensor, spatial: torch.Tensor,
                 temporal: torch.Tensor, history: torch.Tensor | None = None):
        self.base = base          # (d,)
        self.spatial = spatial    # (S, d), all rows equal base
        self.temporal = temporal  # (T, d), all rows equal base
        self.history = history    # (T_his, d) in forecasting mode


def embed_flow_time(t: float, d: int, num_tokens: int, num_frames: int,
                    t_his: int | None = None) -> FlowTimeEmbeds:
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"flow time {t} outside [0, 1]")
    base = sincos_positions(torch.tensor([t * FLOW_TIME_SCALE], dtype=torch.float64), d)[0]
    history = None
    if t_his is not None:
        pos = HISTORY_POSITION_OFFSET + torch.arange(t_his, dtype=torch.float64)
        history = sincos_positions(pos, d)
    return FlowTimeEmbeds(base,
                          base.expand(num_tokens, d).clone(),
                          base.expand(num_frames, d).clone(),
                          history)


def patchify(frames: torch.Tensor, patch: tuple[int, int]) -> torch.Tensor:
    """Rearrange (..., C, H, W) into patch vectors (..., n_h*n_w, h*w*C).

    Pure index permutation; ``unpatchify`` is its exact inverse.
    """
    h, w = patch
    *lead, c, height, width = frames.shape
    if height % h != 0 or width % w != 0:
        raise ValueError(
            f"image size {height}x{width} not divisible by patch {h}x{w}")
    n_h, n_w = height // h, width // w
    x = frames.reshape(*lead, c, n_h, h, n_w, w)
    # (..., n_h, n_w, h, w, C)
    x = x.movedim(-5, -1).movedim(-4, -3)
    return x.reshape(*lead, n_h * n_w, h * w * c)


def unpatchify(patches: torch.Tensor, patch: tuple[int, int], out_channels: int,
               grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of ``patchify``: (..., n_h*n_w, h*w*C) -> (..., C, H, W)."""
    h, w = patch
    n_h, n_w = grid
    *lead, s, pc = patches.shape
    if s != n_h * n_w:
        raise ValueError(f"token count {s} does not match grid {n_h}x{n_w}")
    if pc != h * w * out_channels:
        raise ValueError(
            f"patch channels {pc} != h*w*C = {h}*{w}*{out_channels}")
    x = patches.reshape(*lead, n_h, n_w, h, w, out_channels)
    x = x.movedim(-1, -5).movedim(-3, -2)
    # now (..., C, n_h, h, n_w, w)
    return x.reshape(*lead, out_channels, n_h * h, n_w * w)


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping h x w x C patches to d channels."""

    def __init__(self, in_channels: int, d: int, patch: tuple[int, int]):
        super().__init__()
        self.patch = tuple(patch)
        self.in_channels = in_channels
        self.proj = nn.Linear(patch[0] * patch[1] * in_channels, d)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., T, C, H, W) -> tokens (..., T, n_h*n_w, d)."""
        if frames.shape[-3] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} channels, got {frames.shape[-3]}")
        return self.proj(patchify(frames, self.patch))


def spatial_to_temporal(tokens: torch.Tensor) -> torch.Tensor:
    """(..., T, S, d) -> (..., S, T, d)."""
    return tokens.transpose(-3, -2)


def temporal_to_spatial(tokens: torch.Tensor) -> torch.Tensor:
    """(..., S, T, d) -> (..., T, S, d)."""
    return tokens.transpose(-3, -2)
