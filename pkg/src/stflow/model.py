"""The velocity-field network: stacked spatio-temporal blocks.

Each block runs a spatial sub-block (attention over patches within a
frame) then a temporal sub-block (attention over frames at a fixed
patch). Every sub-block combines condition injection, metadata addition,
flow-time modulated layer norm, bias-modulated attention, output gating
and a residual:

    out = gate * MSA(scale * LN(inject(z, z_con) + g_meta * meta) + shift) + z

Gates, injector convolutions, bias mix weights and the final projection
are zero-initialized, so a fresh network is an exact identity on its
token stream and predicts exactly zero velocity.

Forecast mode follows the joint-prediction layout: condition injection
and attention bias are dropped from temporal sub-blocks, temporal
attention runs over the concatenated [history tokens; state tokens]
sequence, and the decoder emits history + future frames.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from . import serialization
from .attention import (BiasedSelfAttention, CrossAttention, SpatioTemporalBias,
                        aux_bias_spatial, aux_bias_temporal, downsample_aux,
                        manhattan_bias_spatial, manhattan_bias_temporal)
from .conditioning import GN_GROUPS, ConditionInjector, FlowTimeModulation
from .embeddings import (HISTORY_POSITION_OFFSET, PatchEmbed, embed_doy,
                         embed_lonlat, sincos_1d, sincos_2d, sincos_positions,
                         unpatchify, FLOW_TIME_SCALE)

FUSION_MODES = ("adaptive", "concat", "crossattn")


@dataclass
class ModelConfig:
    channels: int = 3            # C, generated bands
    cond_channels: int = 5       # C_con
    stm_channels: int = 2        # auxiliary prior bands; 0 disables the aux prior
    frames: int = 4              # T (T_fut in forecast mode)
    image_size: int = 16
    patch: int = 4
    d: int = 64
    depth: int = 4
    heads: int = 4
    fusion: str = "adaptive"
    use_stm: bool = True
    use_metadata: bool = True
    use_ffn: bool = False
    forecast: bool = False
    t_his: int = 0
    rff_seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if self.d % GN_GROUPS != 0:
            raise ValueError(f"width {self.d} must be divisible by {GN_GROUPS}")
        if self.image_size % self.patch != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.forecast and self.t_his < 1:
            raise ValueError("forecast mode requires t_his >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch
        return (n, n)

    @property
    def tokens(self) -> int:
        n_h, n_w = self.grid
        return n_h * n_w


class _SubBlock(nn.Module):
    """One spatial or temporal sub-block."""

    def __init__(self, cfg: ModelConfig, kind: str, with_condition: bool):
        super().__init__()
        self.kind = kind
        self.with_condition = with_condition
        self.fusion = cfg.fusion
        d = cfg.d
        if with_condition:
            if cfg.fusion == "adaptive":
                self.injector = ConditionInjector(d, kind)
            elif cfg.fusion == "concat":
                self.fuse = nn.Linear(2 * d, d)
                nn.init.zeros_(self.fuse.weight)
                nn.init.zeros_(self.fuse.bias)
            else:
                self.xattn = CrossAttention(d, cfg.heads)
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mod = FlowTimeModulation(d)
        self.attn = BiasedSelfAttention(d, cfg.heads)
        self.bias_mix = SpatioTemporalBias() if (cfg.use_stm and with_condition) else None
        # metadata contribution has a learnable gate so training can
        # suppress it if unhelpful; starts fully open
        self.meta_gate = nn.Parameter(torch.ones(()))

    def inject(self, z: torch.Tensor, z_con: torch.Tensor,
               grid: tuple[int, int]) -> torch.Tensor:
        """Condition fusion on (B, L, d) token views."""
        if self.fusion == "concat":
            return z + self.fuse(torch.cat([z, z_con], dim=-1))
        if self.fusion == "crossattn":
            return z + self.xattn(z, z_con)
        if self.kind == "spatial":
            n_h, n_w = grid
            h = z.transpose(1, 2).reshape(z.shape[0], z.shape[2], n_h, n_w)
            q = z_con.transpose(1, 2).reshape(*h.shape)
            out = self.injector(h, q)
            return out.reshape(z.shape[0], z.shape[2], -1).transpose(1, 2)
        h = z.transpose(1, 2)  # (B, d, T)
        out = self.injector(h, z_con.transpose(1, 2))
        return out.transpose(1, 2)

    def forward(self, z: torch.Tensor, z_con: torch.Tensor | None,
                meta: torch.Tensor | None, z_fm: torch.Tensor,
                m_pos: torch.Tensor | None, m_aux: torch.Tensor | None,
                grid: tuple[int, int]) -> torch.Tensor:
        h = self.inject(z, z_con, grid) if (self.with_condition and z_con is not None) else z
        if meta is not None:
            h = h + self.meta_gate * meta
        u, gate = self.mod.modulate(self.norm(h), z_fm)
        bias = self.bias_mix(m_pos, m_aux) if self.bias_mix is not None else None
        return gate * self.attn(u, bias) + z


class _FeedForward(nn.Module):
    """Optional MLP sub-layer (config flag, off by default); zero-init output."""

    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.net = nn.Sequential(nn.Linear(d, mult * d), nn.GELU(),
                                 nn.Linear(mult * d, d))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z + self.net(self.norm(z))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.spatial = _SubBlock(cfg, "spatial", with_condition=True)
        self.temporal = _SubBlock(cfg, "temporal", with_condition=not cfg.forecast)
        self.ffn = _FeedForward(cfg.d) if cfg.use_ffn else None


class Decoder(nn.Module):
    """Final modulated LN + zero-init linear projection to patch pixels."""

    def __init__(self, d: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(d, 2 * d)
        self.proj = nn.Linear(d, out_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, z: torch.Tensor, z_fm: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.mod(z_fm).chunk(2, dim=-1)
        return self.proj(gamma * self.norm(z) + beta)


class VelocityField(nn.Module):
    """Predicts dx/dt given the flow state, flow time and conditions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = (cfg.patch, cfg.patch)
        self.embed_state = PatchEmbed(cfg.channels, cfg.d, p)
        self.embed_cond = PatchEmbed(cfg.cond_channels, cfg.d, p)
        n_h, n_w = cfg.grid
        joint_t = cfg.t_his + cfg.frames if cfg.forecast else cfg.frames
        self.pos_spatial = nn.Parameter(sincos_2d(n_h, n_w, cfg.d))
        self.pos_temporal = nn.Parameter(sincos_1d(joint_t, cfg.d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.decoder = Decoder(cfg.d, cfg.patch * cfg.patch * cfg.channels)
        self.register_buffer("m_pos_s", manhattan_bias_spatial(n_h, n_w))
        self.register_buffer("m_pos_t", manhattan_bias_temporal(joint_t))

    # -- shared pieces -----------------------------------------------

    @property
    def _dtype(self) -> torch.dtype:
        return self.pos_spatial.dtype

    def _flow_time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        """t: (B,) in [0, 1] -> (B, d)."""
        if ((t < 0) | (t > 1)).any():
            raise ValueError(f"flow time outside [0, 1]: {t.tolist()}")
        return sincos_positions(t.detach().to(torch.float64) * FLOW_TIME_SCALE,
                                self.cfg.d).to(self._dtype)

    def _metadata(self, doys: torch.Tensor | None, lonlat: torch.Tensor | None,
                  batch: int, frames: int):
        cfg = self.cfg
        if not cfg.use_metadata or doys is None:
            z_doy = torch.zeros(batch, frames, cfg.d, dtype=self._dtype)
        else:
            z_doy = torch.stack(
                [embed_doy(doys[b], cfg.d) for b in range(batch)]).to(self._dtype)
        if not cfg.use_metadata or lonlat is None:
            z_geo = torch.zeros(batch, cfg.d, dtype=self._dtype)
        else:
            z_geo = torch.stack(
                [embed_lonlat(lonlat[b].tolist(), cfg.d, cfg.rff_seed)
                 for b in range(batch)]).to(self._dtype)
        return z_doy, z_geo

    def _aux_biases(self, aux: torch.Tensor | None, batch: int, frames: int):
        """Downsampled aux prior -> per-frame spatial and per-patch temporal biases."""
        if aux is None or not self.cfg.use_stm or self.cfg.stm_channels == 0:
            return None, None
        q = downsample_aux(aux, (self.cfg.patch, self.cfg.patch))
        s = self.cfg.tokens
        m_s = aux_bias_spatial(q).reshape(batch * frames, s, s)
        m_t = aux_bias_temporal(q).reshape(batch * s, frames, frames)
        return m_s, m_t

    # -- standard tasks ----------------------------------------------

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                doys: torch.Tensor | None = None,
                lonlat: torch.Tensor | None = None,
                aux: torch.Tensor | None = None) -> torch.Tensor:
        """x_t, cond: (B, T, C[_con], H, W); t: (B,). Returns (B, T, C, H, W)."""
        cfg = self.cfg
        if cfg.forecast:
            raise RuntimeError("model is configured for forecasting; use forward_forecast")
        b, frames = x_t.shape[0], x_t.shape[1]
        if cond.shape[1] != frames or cond.shape[2] != cfg.cond_channels:
            raise ValueError(
                f"condition shape {tuple(cond.shape)}: expected "
                f"{frames} frames x {cfg.cond_channels} channels")
        s, d = cfg.tokens, cfg.d

        z = self.embed_state(x_t) + self.pos_spatial          # (B, T, S, d)
        z = z + self.pos_temporal[:, None, :]
        z_con = self.embed_cond(cond) + self.pos_spatial
        z_con = z_con + self.pos_temporal[:, None, :]

        z_fm = self._flow_time_embedding(t)                   # (B, d)
        z_doy, z_geo = self._metadata(doys, lonlat, b, frames)
        m_aux_s, m_aux_t = self._aux_biases(aux, b, frames)
        fm_s = z_fm.repeat_interleave(frames, dim=0)[:, None, :]   # (B*T, 1, d)
        fm_t = z_fm.repeat_interleave(s, dim=0)[:, None, :]        # (B*S, 1, d)
        geo_s = z_geo.repeat_interleave(frames, dim=0)[:, None, :]
        doy_t = z_doy[:, None].expand(b, s, frames, d).reshape(b * s, frames, d)
        zc_s = z_con.reshape(b * frames, s, d)
        zc_t = z_con.transpose(1, 2).reshape(b * s, frames, d)

        for block in self.blocks:
            zs = z.reshape(b * frames, s, d)
            zs = block.spatial(zs, zc_s, geo_s, fm_s,
                               self.m_pos_s, m_aux_s, cfg.grid)
            z = zs.reshape(b, frames, s, d)
            zt = z.transpose(1, 2).reshape(b * s, frames, d)
            zt = block.temporal(zt, zc_t, doy_t, fm_t,
                                self.m_pos_t, m_aux_t, cfg.grid)
            z = zt.reshape(b, s, frames, d).transpose(1, 2)
            if block.ffn is not None:
                z = block.ffn(z)

        out = self.decoder(z, z_fm[:, None, None, :])
        return unpatchify(out, (cfg.patch, cfg.patch), cfg.channels, cfg.grid)

    # -- forecasting --------------------------------------------------

    def _history_embedding(self) -> torch.Tensor:
        pos = HISTORY_POSITION_OFFSET + torch.arange(self.cfg.t_his, dtype=torch.float64)
        return sincos_positions(pos, self.cfg.d).to(self._dtype)

    def forward_forecast(self, history: torch.Tensor, x_t: torch.Tensor,
                         t: torch.Tensor, fut_doys: torch.Tensor | None = None,
                         lonlat: torch.Tensor | None = None,
                         aux: torch.Tensor | None = None) -> torch.Tensor:
        """Joint prediction over history + future frames.

        history: (B, T_his, C_con, H, W) clean frames; x_t: (B, T_fut, C, H, W)
        noisy future state. Returns (B, T_his + T_fut, C, H, W); the future
        slice is the predicted velocity, the history slice the reconstructed
        condition frames.
        """
        cfg = self.cfg
        if not cfg.forecast:
            raise RuntimeError("model not configured for forecasting")
        b, t_fut = x_t.shape[0], x_t.shape[1]
        t_his = history.shape[1]
        if t_his != cfg.t_his or t_fut != cfg.frames:
            raise ValueError(
                f"expected {cfg.t_his} history / {cfg.frames} future frames, "
                f"got {t_his}/{t_fut}")
        if t_his != t_fut:
            raise ValueError(
                "spatial condition injection requires t_his == t_fut")
        if cfg.use_metadata and fut_doys is None:
            raise ValueError("future day-of-year list required in forecast mode")
        s, d = cfg.tokens, cfg.d

        z = self.embed_state(x_t) + self.pos_spatial
        z = z + self.pos_temporal[t_his:, None, :]
        z_con = self.embed_cond(history) + self.pos_spatial
        z_con = z_con + self.pos_temporal[:t_his, None, :]

        z_fm = self._flow_time_embedding(t)
        z_fm_con = self._history_embedding()                  # (T_his, d)
        z_doy, z_geo = self._metadata(fut_doys, lonlat, b, t_fut)
        m_aux_s, _ = self._aux_biases(aux, b, t_fut)
        fm_s = z_fm.repeat_interleave(t_fut, dim=0)[:, None, :]
        geo_s = z_geo.repeat_interleave(t_fut, dim=0)[:, None, :]
        # joint temporal modulation rows: history codes then flow-time rows
        fm_joint = torch.cat(
            [z_fm_con.expand(b * s, t_his, d),
             z_fm.repeat_interleave(s, dim=0)[:, None, :].expand(b * s, t_fut, d)],
            dim=1)
        doy_state = z_doy[:, None].expand(b, s, t_fut, d).reshape(b * s, t_fut, d)
        zc_s = z_con.reshape(b * t_his, s, d)
        zc_t = z_con.transpose(1, 2).reshape(b * s, t_his, d)

        first = True
        for block in self.blocks:
            zs = z.reshape(b * t_fut, s, d)
            zs = block.spatial(zs, zc_s, geo_s, fm_s,
                               self.m_pos_s, m_aux_s, cfg.grid)
            z = zs.reshape(b, t_fut, s, d)
            zt = z.transpose(1, 2).reshape(b * s, t_fut, d)
            if first:
                zt = zt + doy_state
                first = False
            joint = torch.cat([zc_t, zt], dim=1)
            u, gate = block.temporal.mod.modulate(block.temporal.norm(joint), fm_joint)
            attn_out = block.temporal.attn(u, None)
            zt = gate[:, t_his:] * attn_out[:, t_his:] + zt
            z = zt.reshape(b, s, t_fut, d).transpose(1, 2)
            if block.ffn is not None:
                z = block.ffn(z)

        joint_tokens = torch.cat([z_con, z], dim=1)           # (B, T_his+T_fut, S, d)
        fm_dec = torch.cat(
            [z_fm_con[None, :, None, :].expand(b, t_his, 1, d),
             z_fm[:, None, None, :].expand(b, t_fut, 1, d)], dim=1)
        out = self.decoder(joint_tokens, fm_dec)
        return unpatchify(out, (cfg.patch, cfg.patch), cfg.channels, cfg.grid)


# -- checkpointing ----------------------------------------------------

def save_checkpoint(path, model: VelocityField, step: int = 0, seed: int = 0,
                    extra: dict | None = None) -> None:
    manifest = {"kind": "checkpoint", "config": asdict(model.cfg),
                "step": step, "seed": seed}
    if extra:
        manifest["extra"] = extra
    state = {name: t for name, t in model.state_dict().items()}
    serialization.save_container(path, manifest, state)


def load_checkpoint(path) -> tuple[VelocityField, dict]:
    manifest, tensors = serialization.load_container(path)
    if manifest.get("kind") != "checkpoint":
        raise serialization.FormatError("not a checkpoint container")
    model = VelocityField(ModelConfig(**manifest["config"]))
    model.load_state_dict(tensors)
    return model, manifest
