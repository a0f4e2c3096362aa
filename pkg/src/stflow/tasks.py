"""Task workflows: condition assembly, label codecs, windowed inference.

Each workflow maps a time-series sample to a (state, condition) pair for
the velocity field. The condition stack always carries the observed
modalities; absent modalities are zero-filled so channel counts stay
fixed between training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

TASKS = ("recon", "cloudrm", "scd", "forecast")

MASK_FILL = 1.0

# documented channel presets: (condition channels, state channels)
TASK_PRESETS = {
    "recon": {"default": (12, 10)},
    "cloudrm": {"default": (12, 10)},
    "scd": {"pair-aux": (4, 6), "pair": (3, 2)},
    "forecast": {"default": (10, 10), "reduced": (6, 4)},
}


@dataclass
class TaskBatch:
    state: torch.Tensor               # (T, C, H, W) target for generation
    condition: torch.Tensor           # (T, C_con, H, W)
    doys: list[int]
    lonlat: tuple[float, float]
    aux: torch.Tensor | None = None   # raw auxiliary frames for bias maps
    missing: list[int] | None = None  # indices of fully masked frames


def _aux_or_zeros(sample, use_aux: bool, aux_channels: int) -> torch.Tensor:
    t, _, h, w = sample.x_clear.shape
    if use_aux and sample.q_aux is not None:
        return sample.q_aux
    return torch.zeros(t, aux_channels, h, w)


def mask_frames(frames: torch.Tensor, rate: float,
                generator: torch.Generator) -> tuple[torch.Tensor, list[int]]:
    """Mask round(rate * T) whole frames with the fill constant."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate {rate} outside [0, 1]")
    t = frames.shape[0]
    n_miss = int(round(rate * t))
    order = torch.randperm(t, generator=generator).tolist()
    missing = sorted(order[:n_miss])
    out = frames.clone()
    for i in missing:
        out[i] = MASK_FILL
    return out, missing


def assemble_recon(sample, rate: float, generator: torch.Generator,
                   use_aux: bool = True, aux_channels: int = 2) -> TaskBatch:
    """Reconstruction: recover a sequence from partly missing frames."""
    masked, missing = mask_frames(sample.x_clear, rate, generator)
    aux = _aux_or_zeros(sample, use_aux, aux_channels)
    return TaskBatch(state=sample.x_clear,
                     condition=torch.cat([masked, aux], dim=1),
                     doys=list(sample.m_doy), lonlat=sample.m_lonlat,
                     aux=aux if use_aux and sample.q_aux is not None else None,
                     missing=missing)


def assemble_cloudrm(sample, use_aux: bool = True,
                     aux_channels: int = 2) -> TaskBatch:
    """Cloud removal: recover clear frames from contaminated acquisitions."""
    if sample.x_contam is None:
        raise ValueError("sample has no contaminated frames")
    aux = _aux_or_zeros(sample, use_aux, aux_channels)
    return TaskBatch(state=sample.x_clear,
                     condition=torch.cat([sample.x_contam, aux], dim=1),
                     doys=list(sample.m_doy), lonlat=sample.m_lonlat,
                     aux=aux if use_aux and sample.q_aux is not None else None)


def assemble_scd(sample, num_classes: int, use_aux: bool = True,
                 aux_channels: int = 1) -> TaskBatch:
    """Semantic change detection: generate per-frame class maps."""
    if sample.labels is None:
        raise ValueError("sample has no labels")
    parts = [sample.x_clear]
    if use_aux and sample.q_aux is not None:
        parts.append(sample.q_aux[:, :aux_channels])
    return TaskBatch(state=encode_onehot(sample.labels, num_classes),
                     condition=torch.cat(parts, dim=1),
                     doys=list(sample.m_doy), lonlat=sample.m_lonlat,
                     aux=(sample.q_aux[:, :aux_channels]
                          if use_aux and sample.q_aux is not None else None))


def assemble_forecast(sample, t_his: int, use_aux: bool = True,
                      aux_channels: int = 2
                      ) -> tuple[torch.Tensor, torch.Tensor, TaskBatch]:
    """Forecasting: split into history condition and future target."""
    t = len(sample)
    if t < 2 * t_his:
        raise ValueError(f"need {2 * t_his} frames, sample has {t}")
    aux = _aux_or_zeros(sample, use_aux, aux_channels)
    history = torch.cat([sample.x_clear[:t_his], aux[:t_his]], dim=1)
    future = sample.x_clear[t_his:2 * t_his]
    batch = TaskBatch(state=future, condition=history,
                      doys=list(sample.m_doy[t_his:2 * t_his]),
                      lonlat=sample.m_lonlat,
                      aux=aux[:t_his] if use_aux and sample.q_aux is not None
                      else None)
    return history, future, batch


# -- label codec --------------------------------------------------------

def encode_onehot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(..., H, W) int labels to (..., K, H, W) float one-hot."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, -3).float()


def decode_argmax(scores: torch.Tensor) -> torch.Tensor:
    """(..., K, H, W) scores to (..., H, W) labels; ties pick the lowest index."""
    return scores.argmax(dim=-3)


# -- long-sequence inference --------------------------------------------

def window_plan(length: int, window: int) -> list[int]:
    """Start offsets covering a sequence with non-overlapping windows.

    The final window is right-aligned when the length is not a multiple
    of the window size, so every frame is covered exactly once except a
    possible overlap before the last window (first write wins there).
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if length < window:
        raise ValueError(f"sequence length {length} < window {window}")
    starts = list(range(0, length - window + 1, window))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def infer_sequence(predict_window, sample, window: int) -> torch.Tensor:
    """Run a per-window predictor over an arbitrary-length sample.

    ``predict_window`` receives a TimeSeriesSample slice of exactly
    ``window`` frames and returns (window, C, H, W). Sequences shorter
    than the window are padded by repeating the final frame; the padded
    outputs are dropped.
    """
    length = len(sample)
    if length < window:
        padded = _pad_sample(sample, window)
        return infer_sequence(predict_window, padded, window)[:length]
    out = None
    written = torch.zeros(length, dtype=torch.bool)
    for start in window_plan(length, window):
        pred = predict_window(_slice_sample(sample, start, start + window))
        if out is None:
            out = torch.zeros(length, *pred.shape[1:], dtype=pred.dtype)
        for i in range(window):
            if not written[start + i]:
                out[start + i] = pred[i]
                written[start + i] = True
    return out


def infer_autoregressive(predict_future, history: torch.Tensor,
                         horizon: int) -> torch.Tensor:
    """Roll a fixed-history forecaster forward to an arbitrary horizon.

    ``predict_future`` maps (T_his, C_con, H, W) to (T_his, C, H, W).
    Generated optical frames replace the oldest history entries on each
    roll; auxiliary channels of generated frames are zero-filled.
    """
    t_his, c_con = history.shape[0], history.shape[1]
    buf = history.clone()
    outputs = []
    while sum(o.shape[0] for o in outputs) < horizon:
        pred = predict_future(buf)
        outputs.append(pred)
        c = pred.shape[1]
        gen_cond = torch.zeros(pred.shape[0], c_con, *pred.shape[2:],
                               dtype=buf.dtype)
        gen_cond[:, :c] = pred
        buf = torch.cat([buf, gen_cond], dim=0)[-t_his:]
    return torch.cat(outputs, dim=0)[:horizon]


def _slice_sample(sample, start: int, stop: int):
    from .synthdata import TimeSeriesSample
    return TimeSeriesSample(
        x_clear=sample.x_clear[start:stop],
        q_aux=None if sample.q_aux is None else sample.q_aux[start:stop],
        x_contam=None if sample.x_contam is None else sample.x_contam[start:stop],
        labels=None if sample.labels is None else sample.labels[start:stop],
        m_doy=sample.m_doy[start:stop],
        m_lonlat=sample.m_lonlat,
        cloud_frac=sample.cloud_frac[start:stop],
        shadow_frac=sample.shadow_frac[start:stop])


def _pad_sample(sample, window: int):
    from .synthdata import TimeSeriesSample
    length = len(sample)
    extra = window - length

    def rep(x):
        if x is None:
            return None
        return torch.cat([x] + [x[-1:]] * extra, dim=0)

    pad_doys = list(sample.m_doy) + [sample.m_doy[-1] + i + 1
                                     for i in range(extra)]
    return TimeSeriesSample(
        x_clear=rep(sample.x_clear), q_aux=rep(sample.q_aux),
        x_contam=rep(sample.x_contam), labels=rep(sample.labels),
        m_doy=pad_doys, m_lonlat=sample.m_lonlat,
        cloud_frac=sample.cloud_frac + [sample.cloud_frac[-1]] * extra,
        shadow_frac=sample.shadow_frac + [sample.shadow_frac[-1]] * extra)
