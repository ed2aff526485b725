"""Seeded synthetic scenes standing in for real Sentinel-2 / LiDAR pairs.

The forward model is deliberately simple: a fine-grid canopy surface made
of paraboloid crowns, a percentile-pooled reference raster, and per-band
reflectance that mixes soil and vegetation spectra by local canopy cover,
darkened slightly by canopy height, modulated by a seasonal sinusoid and
corrupted by Gaussian noise and cloud disks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .datamodel import (
    MIN_VEG_HEIGHT, ManifestEntry, ReferenceRaster, SITSPatch, GeoInfo, apply_vegetation_masks,
    save_patch, write_manifest,
)

SOIL = np.array([0.08, 0.10, 0.12, 0.15, 0.18, 0.20, 0.22, 0.23, 0.28, 0.22])
VEGETATION = np.array([0.03, 0.06, 0.03, 0.10, 0.28, 0.35, 0.38, 0.40, 0.18, 0.08])
# reflectance change per unit normalized canopy height (shadowing)
HEIGHT_RESPONSE = np.array([-0.005, -0.01, -0.005, -0.01, -0.03, -0.05, -0.06, -0.06, -0.04, -0.02])


@dataclass(frozen=True)
class SynthConfig:
    size: int = 100                 # input side in 10 m pixels
    ref_margin: int = 10            # input pixels between patch edge and reference extent
    target_resolution: float = 2.5
    fine_resolution: float = 1.25
    crown_density: float = 120.0    # crowns per hectare inside stands
    crown_scale: float = 1.0        # multiplier on the height-dependent crown radius
    stand_fraction: float = 0.6
    height_range: tuple[float, float] = (4.0, 35.0)
    crop_probability: float = 0.3
    crop_height: tuple[float, float] = (1.8, 3.0)
    phenology_amplitude: float = 0.3
    phenology_phase: float = 100.0
    n_dates: tuple[int, int] = (8, 16)
    cloud_probability: float = 0.2
    noise: float = 0.005
    year: int = 2022
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "height_range", tuple(self.height_range))
        object.__setattr__(self, "crop_height", tuple(self.crop_height))
        object.__setattr__(self, "n_dates", tuple(int(v) for v in self.n_dates))
        if self.size <= 2 * self.ref_margin:
            raise ValueError("size must exceed twice the reference margin")
        per_pixel = 10.0 / self.fine_resolution
        per_target = self.target_resolution / self.fine_resolution
        if abs(per_pixel - round(per_pixel)) > 1e-9 or abs(per_target - round(per_target)) > 1e-9:
            raise ValueError("fine resolution must divide both 10 m and the target resolution")

    @property
    def factor(self) -> int:
        return int(round(10.0 / self.target_resolution))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("height_range", "crop_height", "n_dates"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_field(rng, shape, scale_px: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian random field via spectral filtering."""
    noise = rng.standard_normal(shape)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    filt = np.exp(-0.5 * (fx ** 2 + fy ** 2) * (2 * math.pi * scale_px) ** 2)
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
    return (field - field.mean()) / (field.std() + 1e-12)


def canopy_surface(cfg: SynthConfig, rng: np.random.Generator):
    """Fine-grid canopy heights and the crop-parcel rectangle (fine pixels) or None."""
    n = int(round(cfg.size * 10.0 / cfg.fine_resolution))
    res = cfg.fine_resolution
    surface = np.zeros((n, n))
    stands = _smooth_field(rng, (n, n), 60.0 / res)
    site = _smooth_field(rng, (n, n), 120.0 / res)
    threshold = np.quantile(stands, 1.0 - cfg.stand_fraction) if cfg.stand_fraction > 0 else np.inf
    area_ha = (n * res) ** 2 / 1e4
    n_crowns = rng.poisson(cfg.crown_density * area_ha)
    lo, hi = cfg.height_range
    cy = rng.uniform(0, n, n_crowns)
    cx = rng.uniform(0, n, n_crowns)
    jitter = rng.uniform(-0.15, 0.15, n_crowns)
    radius_noise = rng.uniform(0.8, 1.2, n_crowns)
    for y, x, j, rn in zip(cy, cx, jitter, radius_noise):
        iy, ix = int(y), int(x)
        if stands[iy, ix] < threshold:
            continue
        rel = 1.0 / (1.0 + math.exp(-1.5 * site[iy, ix]))
        h = lo + (hi - lo) * min(max(rel + j, 0.0), 1.0)
        r = (1.0 + 0.12 * h) * cfg.crown_scale * rn / res
        y0, y1 = max(int(y - r), 0), min(int(y + r) + 2, n)
        x0, x1 = max(int(x - r), 0), min(int(x + r) + 2, n)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = ((yy + 0.5 - y) ** 2 + (xx + 0.5 - x) ** 2) / (r * r)
        crown = np.where(d2 < 1.0, h * (1.0 - 0.6 * d2), 0.0)
        np.maximum(surface[y0:y1, x0:x1], crown, out=surface[y0:y1, x0:x1])

    parcel = None
    if cfg.crown_density > 0 and rng.uniform() < cfg.crop_probability:
        ph, pw = (int(v) for v in rng.integers(n // 6, n // 3, size=2))
        py, px = (int(v) for v in rng.integers(0, n - max(ph, pw), size=2))
        parcel = (py, px, ph, pw)
        crop = rng.uniform(*cfg.crop_height) + 0.2 * rng.standard_normal((ph, pw))
        surface[py:py + ph, px:px + pw] = np.clip(crop, 0.0, None)
    return surface, parcel


def block_percentile(grid: np.ndarray, block: int, q: float = 95.0) -> np.ndarray:
    """Percentile (linear interpolation) over non-overlapping ``block`` squares."""
    h, w = grid.shape
    tiles = grid.reshape(h // block, block, w // block, block).transpose(0, 2, 1, 3)
    return np.percentile(tiles.reshape(h // block, w // block, -1), q, axis=-1)


def block_mean(grid: np.ndarray, block: int) -> np.ndarray:
    h, w = grid.shape
    return grid.reshape(h // block, block, w // block, block).mean(axis=(1, 3))


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator | None = None):
    """One (SITSPatch, ReferenceRaster) pair, deterministic for a given seed."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    surface, parcel = canopy_surface(cfg, rng)
    per_pixel = int(round(10.0 / cfg.fine_resolution))
    per_target = int(round(cfg.target_resolution / cfg.fine_resolution))

    # reference over the inner extent
    m = cfg.ref_margin * per_pixel
    inner = surface[m:-m, m:-m] if m else surface
    ref = block_percentile(inner, per_target)
    in_crop = None
    if parcel is not None:
        py, px, ph, pw = parcel
        mask = np.zeros_like(surface, dtype=bool)
        mask[py:py + ph, px:px + pw] = True
        inner_mask = mask[m:-m, m:-m] if m else mask
        # a target pixel is in the parcel when its center fine cell is
        c = per_target // 2
        in_crop = inner_mask[c::per_target, c::per_target]
    heights, valid = apply_vegetation_masks(ref, in_crop)

    # per-10 m pixel descriptors
    cover = block_mean((surface >= MIN_VEG_HEIGHT).astype(float), per_pixel)
    hnorm = block_mean(surface, per_pixel) / cfg.height_range[1]

    lo_n, hi_n = cfg.n_dates
    n_dates = int(rng.integers(lo_n, hi_n + 1))
    season = np.arange(121, 305)
    dates = np.sort(rng.choice(season, size=min(n_dates, season.size), replace=False))
    bands = np.empty((dates.size, 10, cfg.size, cfg.size), dtype=np.float32)
    cloud = np.zeros((dates.size, cfg.size, cfg.size), dtype=bool)
    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size]
    for t, doy in enumerate(dates):
        pheno = 1.0 + cfg.phenology_amplitude * math.sin(2 * math.pi * (doy - cfg.phenology_phase) / 365.0)
        veg = VEGETATION[:, None, None] * np.where(np.arange(10) >= 4, pheno, 1.0)[:, None, None]
        refl = (SOIL[:, None, None] * (1 - cover) + veg * cover + HEIGHT_RESPONSE[:, None, None] * hnorm)
        refl = refl + cfg.noise * rng.standard_normal(refl.shape)
        if rng.uniform() < cfg.cloud_probability:
            r = rng.uniform(3, 10)
            cy, cx = rng.uniform(0, cfg.size, 2)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            cloud[t] = disk
            refl[:, disk] = 0.0
        bands[t] = np.clip(refl, 0.0, 1.0)

    angles = np.column_stack([
        np.radians(rng.uniform(25, 50, dates.size)),
        np.radians(rng.uniform(140, 170, dates.size)),
        np.radians(rng.uniform(2, 10, dates.size)),
        np.radians(rng.uniform(100, 290, dates.size)),
    ])
    x0 = 500000.0 + 1000.0 * float(rng.integers(0, 500))
    y0 = 6500000.0 - 1000.0 * float(rng.integers(0, 500))
    geo = GeoInfo(x0, y0, 10.0, "EPSG:2154")
    patch = SITSPatch(bands, cloud, angles, dates.astype(np.int64), geo, year=cfg.year)
    lidar_doy = int(rng.integers(121, 274))
    reference = ReferenceRaster(heights, valid, lidar_doy, cfg.target_resolution,
                                geo.offset(cfg.ref_margin, cfg.ref_margin).rescaled(cfg.factor),
                                year=cfg.year)
    return patch, reference


def vegetation_index(bands: np.ndarray) -> np.ndarray:
    """NDVI-like proxy from B08 (index 6) and B04 (index 2)."""
    nir, red = bands[..., 6, :, :], bands[..., 2, :, :]
    return (nir - red) / np.maximum(nir + red, 1e-6)


def generate_dataset(out_dir, n: int, cfg: SynthConfig, splits=(("train", 0.7), ("val", 0.15), ("test", 0.15))):
    """Write ``n`` patches plus a ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    names = [name for name, _ in splits]
    cum = np.cumsum([frac for _, frac in splits])
    entries = []
    for i, ss in enumerate(seeds):
        patch, reference = generate_synthetic(cfg, np.random.default_rng(ss))
        rel = f"patches/patch_{i:05d}.npz"
        save_patch(out / rel, patch, reference)
        # deterministic split by position in the sequence
        u = (i + 0.5) / n
        split = names[min(int(np.searchsorted(cum, u)), len(names) - 1)]
        entries.append(ManifestEntry(rel, split))
    return write_manifest(out / "manifest.txt", entries)
