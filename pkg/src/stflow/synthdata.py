"""Procedural multimodal time-series simulator with known ground truth.

A world is a seeded Voronoi segmentation with per-class seasonal spectra;
rendering produces cloud-free optical frames, a cloud-independent
auxiliary modality (a fixed band mixing of the clear reflectance plus
speckle), and per-frame label maps with an optional mid-year class
change. Contamination adds smooth cloud/shadow blobs with controllable
coverage. Acquisition streams are filtered with the same rules as the
real benchmarks: cloud < 15%, shadow < 30%, auxiliary match within
+/- 3 days, minimum sequence length 8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import serialization

CLOUD_MAX = 0.15
SHADOW_MAX = 0.30
MATCH_WINDOW_DAYS = 3
MIN_SEQUENCE = 8


@dataclass
class TimeSeriesSample:
    x_clear: torch.Tensor                    # (T, C, H, W) in [0, 1]
    q_aux: torch.Tensor | None = None        # (T, C_aux, H, W)
    x_contam: torch.Tensor | None = None     # (T, C, H, W)
    labels: torch.Tensor | None = None       # (T, H, W) int64
    m_doy: list[int] = field(default_factory=list)
    m_lonlat: tuple[float, float] = (0.0, 0.0)
    cloud_frac: list[float] = field(default_factory=list)
    shadow_frac: list[float] = field(default_factory=list)

    def __post_init__(self):
        t = self.x_clear.shape[0]
        if len(self.m_doy) != t:
            raise ValueError(f"{len(self.m_doy)} dates for {t} frames")
        if any(b <= a for a, b in zip(self.m_doy, self.m_doy[1:])):
            raise ValueError(f"dates must be strictly increasing: {self.m_doy}")
        if self.x_clear.min() < 0 or self.x_clear.max() > 1:
            raise ValueError("reflectance outside [0, 1]")

    def __len__(self) -> int:
        return self.x_clear.shape[0]


@dataclass
class World:
    class_map: np.ndarray        # (H, W) int
    change_map: np.ndarray       # (H, W) int, classes after the change date
    change_day: int
    base: np.ndarray             # (K, C)
    amp: np.ndarray              # (K, C)
    phase: np.ndarray            # (K,)
    texture: np.ndarray          # (C, H, W)
    aux_mix: np.ndarray          # (C_aux, C)
    num_classes: int

    def labels_at(self, doy: int) -> np.ndarray:
        return self.change_map if doy >= self.change_day else self.class_map


def generate_world(seed: int, height: int, width: int, channels: int = 3,
                   classes: int = 4, aux_channels: int = 2,
                   change_fraction: float = 0.25) -> World:
    """Seeded Voronoi world with per-class seasonal spectra."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(classes, 2)) * [height, width]
    yy, xx = np.mgrid[0:height, 0:width]
    dist = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    region = np.argmin(dist, axis=-1)
    class_of_region = rng.permutation(classes)
    class_map = class_of_region[region]

    # some regions switch class at a mid-year date: ground truth for change
    change_map = class_map.copy()
    change_day = int(rng.integers(120, 250))
    for r in range(classes):
        if rng.uniform() < change_fraction:
            change_map[region == r] = rng.integers(0, classes)

    base = rng.uniform(0.2, 0.6, size=(classes, channels))
    amp = rng.uniform(0.08, 0.30, size=(classes, channels))
    phase = rng.uniform(0, 365, size=classes)
    texture = rng.normal(0, 0.02, size=(channels, height, width))
    # The aux band mixing models a fixed second sensor, so it is the same
    # for every world rather than drawn from the world's rng.
    mix_rng = np.random.default_rng(3021)
    aux_mix = mix_rng.uniform(0.2, 1.0, size=(aux_channels, channels))
    aux_mix /= aux_mix.sum(axis=1, keepdims=True)
    return World(class_map, change_map, change_day, base, amp, phase,
                 texture, aux_mix, classes)


def render_timeseries(world: World, doys, lonlat, seed: int
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Clear frames and auxiliary frames for the given acquisition dates.

    Per-class reflectance follows base + amp * sin(2*pi*(doy - phase)/365)
    with a latitude-dependent phase shift; the auxiliary modality is a
    fixed band mixing of the clear reflectance plus seeded speckle,
    independent of any cloud state.
    """
    rng = np.random.default_rng(seed)
    lat = float(lonlat[1])
    phase_shift = lat / 90.0 * 30.0
    frames, aux_frames = [], []
    channels = world.base.shape[1]
    for doy in doys:
        labels = world.labels_at(int(doy))
        angle = 2.0 * np.pi * (doy - world.phase - phase_shift) / 365.0
        refl = world.base + world.amp * np.sin(angle)[:, None]  # (K, C)
        # per-date atmospheric state: a brightness factor that oscillates on
        # a ~6-day clock, far faster than the acquisition cadence, so temporal
        # interpolation between acquisitions cannot track it. Only a model
        # that actually reads the acquisition dates can recover it.
        illum = 1.0 + 0.35 * np.sin(doy) + 0.25 * np.cos(doy)
        flat = refl[labels].transpose(2, 0, 1) + world.texture
        img = np.clip(flat * illum, 0.0, 1.0)
        # the auxiliary sensor is immune to the atmospheric state: it mixes
        # the unmodulated reflectance, so it reveals structure but not
        # brightness
        speckle = rng.normal(0, 0.02, size=(world.aux_mix.shape[0],
                                            *labels.shape))
        aux = np.clip(np.einsum("ac,chw->ahw", world.aux_mix,
                                np.clip(flat, 0.0, 1.0)) + speckle,
                      0.0, 1.0)
        frames.append(img)
        aux_frames.append(aux)
    return (torch.from_numpy(np.stack(frames)).float(),
            torch.from_numpy(np.stack(aux_frames)).float())


def _value_noise(rng: np.random.Generator, height: int, width: int,
                 cells: int = 4) -> np.ndarray:
    """Smooth lattice noise in [0, 1] via bilinear upsampling of a random grid."""
    grid = rng.uniform(0, 1, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, height)
    xs = np.linspace(0, cells, width)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid
    return ((1 - fy) * (1 - fx) * g[np.ix_(y0, x0)]
            + (1 - fy) * fx * g[np.ix_(y0, x0 + 1)]
            + fy * (1 - fx) * g[np.ix_(y0 + 1, x0)]
            + fy * fx * g[np.ix_(y0 + 1, x0 + 1)])


def contaminate(frames: torch.Tensor, seed: int, cloud_density: float
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                           list[float], list[float]]:
    """Add smooth cloud blobs and displaced shadows.

    Returns (contaminated, cloud_masks, shadow_masks, cloud_fracs,
    shadow_fracs). The binary cloud fraction tracks ``cloud_density``
    (quantile thresholding), so coverage statistics are directly
    calibratable.
    """
    rng = np.random.default_rng(seed)
    x = frames.numpy().copy()
    t, _, height, width = x.shape
    cloud_masks = np.zeros((t, height, width), dtype=bool)
    shadow_masks = np.zeros((t, height, width), dtype=bool)
    for i in range(t):
        if cloud_density <= 0:
            continue
        fld = _value_noise(rng, height, width)
        thr = np.quantile(fld, 1.0 - min(cloud_density, 1.0))
        w = np.clip(0.5 + (fld - thr) / 0.1, 0.0, 1.0)
        mask = fld >= thr
        cloud_val = 0.9 + 0.1 * _value_noise(rng, height, width)
        x[i] = x[i] * (1 - w) + cloud_val * w
        dy, dx = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        w_sh = np.roll(np.roll(w, dy, axis=0), dx, axis=1)
        shadow = (w_sh >= 0.5) & ~mask
        x[i] = x[i] * (1 - 0.5 * w_sh * ~mask[None])
        cloud_masks[i] = mask
        shadow_masks[i] = shadow
    x = np.clip(x, 0.0, 1.0)
    cloud_fracs = [float(m.mean()) for m in cloud_masks]
    shadow_fracs = [float(m.mean()) for m in shadow_masks]
    return (torch.from_numpy(x).float(),
            torch.from_numpy(cloud_masks),
            torch.from_numpy(shadow_masks),
            cloud_fracs, shadow_fracs)


@dataclass
class Acquisition:
    day: int
    clear: torch.Tensor          # (C, H, W)
    contaminated: torch.Tensor
    labels: torch.Tensor         # (H, W)
    cloud_frac: float
    shadow_frac: float


@dataclass
class AcquisitionStream:
    """One ROI's simulated year: optical acquisitions + an aux-modality stream."""
    optical: list[Acquisition]
    aux_days: list[int]
    aux_frames: list[torch.Tensor]
    lonlat: tuple[float, float]


def generate_stream(seed: int, height: int, width: int, channels: int = 3,
                    classes: int = 4, optical_cadence: int = 3,
                    aux_cadence: int = 4, aux_availability: float = 0.9,
                    mean_cloud: float = 0.5) -> AcquisitionStream:
    """Simulate a full year of acquisitions for one ROI."""
    rng = np.random.default_rng(seed)
    world = generate_world(seed, height, width, channels, classes)
    lonlat = (float(rng.uniform(-180, 180)), float(rng.uniform(-60, 60)))

    opt_days = list(range(1, 366, optical_cadence))
    clear, aux_all = render_timeseries(world, opt_days, lonlat, seed + 1)
    optical = []
    for i, day in enumerate(opt_days):
        density = float(np.clip(rng.uniform(0, 2 * mean_cloud), 0, 1))
        contam, _, _, cf, sf = contaminate(clear[i:i + 1], seed + 10 + i, density)
        optical.append(Acquisition(day, clear[i], contam[0],
                                   torch.from_numpy(world.labels_at(day).copy()),
                                   cf[0], sf[0]))

    aux_days, aux_frames = [], []
    aux_candidate_days = list(range(2, 366, aux_cadence))
    _, aux_rendered = render_timeseries(world, aux_candidate_days, lonlat, seed + 2)
    for i, day in enumerate(aux_candidate_days):
        if rng.uniform() < aux_availability:
            aux_days.append(day)
            aux_frames.append(aux_rendered[i])
    return AcquisitionStream(optical, aux_days, aux_frames, lonlat)


def _nearest_aux(stream: AcquisitionStream, day: int):
    best, best_gap = None, MATCH_WINDOW_DAYS + 1
    for d, frame in zip(stream.aux_days, stream.aux_frames):
        gap = abs(d - day)
        if gap < best_gap:
            best, best_gap = frame, gap
    return best


def build_dataset(stream: AcquisitionStream, mode: str = "ts_s12"
                  ) -> tuple[list[TimeSeriesSample], list[str]]:
    """Apply the benchmark filter rules to a simulated acquisition stream.

    ts_s12: clear frames passing the cloud/shadow thresholds with an aux
    match within +/-3 days. ts_s12cr: additionally requires a cloudy
    acquisition within +/-3 days of the clear reference. Sequences
    shorter than 8 frames are dropped.
    """
    if mode not in ("ts_s12", "ts_s12cr"):
        raise ValueError(f"unknown mode {mode!r}")
    reasons: list[str] = []
    kept = []
    for acq in stream.optical:
        if acq.cloud_frac >= CLOUD_MAX:
            reasons.append(f"day {acq.day}: cloud {acq.cloud_frac:.2f} >= {CLOUD_MAX}")
            continue
        if acq.shadow_frac >= SHADOW_MAX:
            reasons.append(f"day {acq.day}: shadow {acq.shadow_frac:.2f} >= {SHADOW_MAX}")
            continue
        aux = _nearest_aux(stream, acq.day)
        if aux is None:
            reasons.append(f"day {acq.day}: no aux within {MATCH_WINDOW_DAYS} days")
            continue
        if mode == "ts_s12cr":
            cloudy = [o for o in stream.optical
                      if o.day != acq.day
                      and abs(o.day - acq.day) <= MATCH_WINDOW_DAYS
                      and o.cloud_frac >= 0.3]
            if not cloudy:
                reasons.append(f"day {acq.day}: no cloudy acquisition within "
                               f"{MATCH_WINDOW_DAYS} days")
                continue
            contam = min(cloudy, key=lambda o: abs(o.day - acq.day))
            kept.append((acq, aux, contam))
        else:
            kept.append((acq, aux, None))
    if len(kept) < MIN_SEQUENCE:
        reasons.append(f"sequence length {len(kept)} < {MIN_SEQUENCE}: dropped")
        return [], reasons

    sample = TimeSeriesSample(
        x_clear=torch.stack([a.clear for a, _, _ in kept]),
        q_aux=torch.stack([aux for _, aux, _ in kept]),
        x_contam=(torch.stack([c.contaminated for _, _, c in kept])
                  if mode == "ts_s12cr" else None),
        labels=torch.stack([a.labels for a, _, _ in kept]),
        m_doy=[a.day for a, _, _ in kept],
        m_lonlat=stream.lonlat,
        cloud_frac=[a.cloud_frac for a, _, _ in kept],
        shadow_frac=[a.shadow_frac for a, _, _ in kept])
    return [sample], reasons


def generate_samples(num: int, size: int, frames: int, seed: int,
                     channels: int = 3, classes: int = 4,
                     aux_channels: int = 2,
                     aux_dropout: float = 0.0) -> list[TimeSeriesSample]:
    """Fixed-length clear+aux samples, one seeded world per sample.

    Convenience generator for toy training runs (skips acquisition
    filtering; dates are a random strictly increasing subset of the year).
    aux_dropout zeroes the auxiliary frames of that fraction of dates,
    simulating partial auxiliary coverage.
    """
    samples = []
    gap_hi = min(40, max(6, 360 // frames - 2))
    for i in range(num):
        s = seed + 1000 * i
        rng = np.random.default_rng(s)
        world = generate_world(s, size, size, channels, classes, aux_channels)
        start = int(rng.integers(1, 366 - gap_hi * frames))
        doys = [start + int(d) for d in
                np.cumsum(rng.integers(4, gap_hi, size=frames))]
        lonlat = (float(rng.uniform(-180, 180)), float(rng.uniform(-60, 60)))
        clear, aux = render_timeseries(world, doys, lonlat, s + 1)
        if aux_dropout > 0:
            drop = rng.uniform(size=frames) < aux_dropout
            aux[torch.from_numpy(drop)] = 0.0
        labels = torch.stack(
            [torch.from_numpy(world.labels_at(d).copy()) for d in doys])
        samples.append(TimeSeriesSample(x_clear=clear, q_aux=aux, labels=labels,
                                        m_doy=doys, m_lonlat=lonlat,
                                        cloud_frac=[0.0] * frames,
                                        shadow_frac=[0.0] * frames))
    return samples


# -- sample container I/O ----------------------------------------------

def write_sample(path, sample: TimeSeriesSample) -> None:
    tensors = {"x_clear": sample.x_clear}
    if sample.q_aux is not None:
        tensors["q_aux"] = sample.q_aux
    if sample.x_contam is not None:
        tensors["x_contam"] = sample.x_contam
    if sample.labels is not None:
        tensors["labels"] = sample.labels.to(torch.float32)
    manifest = {"kind": "sample",
                "m_doy": list(sample.m_doy),
                "m_lonlat": list(sample.m_lonlat),
                "cloud_frac": sample.cloud_frac,
                "shadow_frac": sample.shadow_frac}
    serialization.save_container(path, manifest, tensors)


def read_sample(path) -> TimeSeriesSample:
    manifest, tensors = serialization.load_container(path)
    if manifest.get("kind") != "sample":
        raise serialization.FormatError("not a sample container")
    labels = tensors.get("labels")
    return TimeSeriesSample(
        x_clear=tensors["x_clear"],
        q_aux=tensors.get("q_aux"),
        x_contam=tensors.get("x_contam"),
        labels=None if labels is None else labels.round().to(torch.int64),
        m_doy=[int(d) for d in manifest["m_doy"]],
        m_lonlat=tuple(manifest["m_lonlat"]),
        cloud_frac=list(manifest["cloud_frac"]),
        shadow_frac=list(manifest["shadow_frac"]))
