"""Turning stored patches into padded training/evaluation batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import N_BANDS, T_MIN, ReferenceRaster, SITSPatch
from .encoders import normalize_doy_lidar, normalize_doy_s2
from .errors import TooFewObservations

STRATEGIES = ("random", "equal_range")


@dataclass(frozen=True)
class SamplerConfig:
    t_max: int = 12
    t_min: int = T_MIN
    window: int = 64
    margin: int = 8
    strategy: str = "random"

    def __post_init__(self):
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.window <= 0 or self.margin < 0:
            raise ValueError("window must be positive and margin non-negative")

    @property
    def input_size(self) -> int:
        return self.window + 2 * self.margin


def sample_timesteps(n_available: int, cfg: SamplerConfig, rng: np.random.Generator | None = None,
                     strategy: str | None = None) -> np.ndarray:
    """Pick at most ``t_max`` increasing indices out of ``n_available`` dates.

    ``random`` draws uniformly without replacement; ``equal_range`` splits
    the series into ``t_max`` equal bins and keeps the first date of each.
    """
    strategy = strategy or cfg.strategy
    if n_available < cfg.t_min:
        raise TooFewObservations(n_available, cfg.t_min)
    if n_available <= cfg.t_max:
        return np.arange(n_available)
    if strategy == "equal_range":
        return (np.arange(cfg.t_max) * n_available) // cfg.t_max
    if rng is None:
        raise ValueError("random sampling needs an rng")
    return np.sort(rng.choice(n_available, size=cfg.t_max, replace=False))


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError(f"zero standard deviation in channels {np.flatnonzero(std <= 0).tolist()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, n: int = N_BANDS) -> "ChannelStats":
        return cls(np.zeros(n), np.ones(n))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def compute_channel_stats(bands: np.ndarray | list) -> ChannelStats:
    """Per-channel mean/std over stacks shaped (..., C, H, W) with channel axis -3."""
    if isinstance(bands, list):
        flat = np.concatenate([np.moveaxis(np.asarray(b, np.float64), -3, 0).reshape(b.shape[-3], -1)
                               for b in bands], axis=1)
    else:
        b = np.asarray(bands, dtype=np.float64)
        flat = np.moveaxis(b, -3, 0).reshape(b.shape[-3], -1)
    return ChannelStats(flat.mean(axis=1), flat.std(axis=1))


def standardize(bands: np.ndarray, stats: ChannelStats) -> np.ndarray:
    shape = (-1, 1, 1)
    return (bands - stats.mean.reshape(shape)) / stats.std.reshape(shape)


def unstandardize(bands: np.ndarray, stats: ChannelStats) -> np.ndarray:
    shape = (-1, 1, 1)
    return bands * stats.std.reshape(shape) + stats.mean.reshape(shape)


def build_input(patch: SITSPatch, stats: ChannelStats) -> np.ndarray:
    """(T, 17, H, W) network input: standardized bands, cloud mask, angle channels."""
    t = patch.length
    h, w = patch.shape
    out = np.empty((t, N_BANDS + 7, h, w), dtype=np.float32)
    out[:, :N_BANDS] = standardize(patch.bands, stats)
    out[:, N_BANDS] = patch.cloud
    out[:, N_BANDS + 1:] = patch.encoded_angles()[:, :, None, None]
    return out


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------

def reference_offset(patch: SITSPatch, reference: ReferenceRaster, factor: int) -> tuple[int, int, int, int]:
    """Reference extent in patch pixels: (row0, col0, rows, cols)."""
    expected = patch.geo.pixel_size / factor
    if abs(reference.resolution - expected) > 1e-9 * expected:
        raise ValueError(f"reference resolution {reference.resolution:g} m does not match "
                         f"{patch.geo.pixel_size:g} m input with factor {factor} (expected {expected:g} m)")
    rows, cols = reference.shape
    if rows % factor or cols % factor:
        raise ValueError(f"reference shape {reference.shape} not divisible by factor {factor}")
    if reference.geo is None:
        return 0, 0, rows // factor, cols // factor
    px = patch.geo.pixel_size
    r0 = (patch.geo.y0 - reference.geo.y0) / px
    c0 = (reference.geo.x0 - patch.geo.x0) / px
    if abs(r0 - round(r0)) > 1e-6 or abs(c0 - round(c0)) > 1e-6:
        raise ValueError("reference grid is not aligned with the patch grid")
    return int(round(r0)), int(round(c0)), rows // factor, cols // factor


def core_position_range(patch, reference, cfg: SamplerConfig, factor: int):
    """Inclusive (min, max) core top-left rows and cols keeping every read in bounds."""
    r0, c0, rh, rw = reference_offset(patch, reference, factor)
    h, w = patch.shape
    lo_r, hi_r = max(r0, cfg.margin), min(r0 + rh, h - cfg.margin) - cfg.window
    lo_c, hi_c = max(c0, cfg.margin), min(c0 + rw, w - cfg.margin) - cfg.window
    if lo_r > hi_r or lo_c > hi_c:
        raise ValueError(f"window {cfg.window} + margin {cfg.margin} does not fit patch {patch.shape} "
                         f"with reference extent {(r0, c0, rh, rw)}")
    return (lo_r, hi_r), (lo_c, hi_c)


def extract_window(patch: SITSPatch, reference: ReferenceRaster, cfg: SamplerConfig,
                   mode: str = "val", position: tuple[int, int] | None = None,
                   rng: np.random.Generator | None = None, factor: int = 1):
    """Crop an input window with margins and the aligned reference core.

    ``position`` is the core's top-left corner in patch pixels. Without it,
    ``train`` mode draws a random position and ``val`` mode centers the core
    on the reference extent. Returns ``(input_patch, reference_core)``.
    """
    (lo_r, hi_r), (lo_c, hi_c) = core_position_range(patch, reference, cfg, factor)
    if position is None:
        if mode == "train":
            if rng is None:
                raise ValueError("train mode needs an rng")
            position = (int(rng.integers(lo_r, hi_r + 1)), int(rng.integers(lo_c, hi_c + 1)))
        elif mode == "val":
            r0, c0, rh, rw = reference_offset(patch, reference, factor)
            position = (r0 + (rh - cfg.window) // 2, c0 + (rw - cfg.window) // 2)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    row, col = position
    if not (lo_r <= row <= hi_r and lo_c <= col <= hi_c):
        raise ValueError(f"window at {position} reads outside the patch or reference")
    r0, c0, _, _ = reference_offset(patch, reference, factor)
    m, win = cfg.margin, cfg.window
    inp = patch.crop(row - m, col - m, win + 2 * m, win + 2 * m)
    ref = reference.crop((row - r0) * factor, (col - c0) * factor, win * factor, win * factor)
    return inp, ref


# --------------------------------------------------------------------------
# Samples and padding
# --------------------------------------------------------------------------

@dataclass
class Sample:
    images: np.ndarray        # (T, 17, H, W)
    s2_offsets: np.ndarray    # (T,)
    lidar_offset: int
    target: np.ndarray        # (f*h, f*w)
    valid: np.ndarray         # (f*h, f*w) bool


def make_sample(patch: SITSPatch, reference: ReferenceRaster, stats: ChannelStats, cfg: SamplerConfig,
                mode: str = "val", rng: np.random.Generator | None = None, factor: int = 1,
                position: tuple[int, int] | None = None) -> Sample:
    """Window + temporal sampling + input assembly for one patch."""
    inp, ref = extract_window(patch, reference, cfg, mode, position, rng, factor)
    strategy = cfg.strategy if mode == "train" else "equal_range"
    idx = sample_timesteps(inp.valid_length, cfg, rng, strategy)
    inp = inp.select(idx)
    return Sample(
        images=build_input(inp, stats),
        s2_offsets=np.array([normalize_doy_s2(d) for d in inp.dates], dtype=np.int64),
        lidar_offset=normalize_doy_lidar(ref.lidar_date, ref.year),
        target=ref.heights.astype(np.float32),
        valid=ref.valid_mask.copy(),
    )


def pad_series(samples: list[Sample], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack samples, zero-padding the date axis to the longest series.

    ``pad_mask`` is True on padded dates.
    """
    t_max = max(s.images.shape[0] for s in samples)
    b = len(samples)
    _, c, h, w = samples[0].images.shape
    images = torch.zeros(b, t_max, c, h, w, dtype=dtype)
    offsets = torch.zeros(b, t_max, dtype=torch.int64)
    pad = torch.ones(b, t_max, dtype=torch.bool)
    for i, s in enumerate(samples):
        t = s.images.shape[0]
        images[i, :t] = torch.from_numpy(s.images)
        offsets[i, :t] = torch.from_numpy(s.s2_offsets)
        pad[i, :t] = False
    batch = {
        "images": images,
        "s2_offsets": offsets,
        "lidar_offset": torch.tensor([s.lidar_offset for s in samples], dtype=torch.int64),
        "pad_mask": pad,
    }
    if samples[0].target is not None:
        batch["target"] = torch.from_numpy(np.stack([s.target for s in samples])).to(dtype)
        batch["valid"] = torch.from_numpy(np.stack([s.valid for s in samples]))
    return batch
