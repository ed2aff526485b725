"""Inference over whole patches: tiling, mosaicking and a bicubic baseline."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import GeoInfo, ReferenceRaster, SITSPatch
from .datapipe import ChannelStats, SamplerConfig, build_input, reference_offset, sample_timesteps
from .encoders import july_first, normalize_doy_lidar, normalize_doy_s2
from .metrics import EvalReport, MetricAccumulator, fap
from .model import CanopyHeightNet


def _series_tensors(patch: SITSPatch, stats: ChannelStats, t_max: int):
    cfg = SamplerConfig(t_max=t_max, strategy="equal_range")
    patch = patch.select(sample_timesteps(patch.valid_length, cfg))
    images = torch.from_numpy(build_input(patch, stats))[None]
    offsets = torch.tensor([[normalize_doy_s2(d) for d in patch.dates]], dtype=torch.int64)
    return images, offsets


def _tile_starts(size: int, tile: int, context: int) -> list[tuple[int, int, int]]:
    """(start, keep_from, keep_to) per tile along one axis, in input pixels.

    Each tile is ``tile`` long and kept only where it has ``context`` pixels
    of real data on every side, except along the patch border where the
    whole-patch run sees the same zero padding.
    """
    if size <= tile:
        return [(0, 0, size)]
    step = tile - 2 * context
    if step <= 0:
        raise ValueError(f"tile {tile} too small for {context} pixels of context")
    out = []
    keep_from = 0
    start = 0
    while True:
        start = min(start, size - tile)
        end = start + tile
        keep_to = size if end == size else end - context
        out.append((start, keep_from, keep_to))
        if keep_to == size:
            return out
        keep_from = keep_to
        start = keep_to - context


@torch.no_grad()
def predict_patch(model: CanopyHeightNet, patch: SITSPatch, stats: ChannelStats, lidar_offset: int = 0,
                  tile: int | None = None, context: int | None = None, t_max: int = 12,
                  return_attention: bool = False):
    """Heights over the whole patch at ``sr_factor`` times its resolution.

    ``lidar_offset`` is days from July 1st (0 conditions on July 1st). With
    ``tile`` set, the patch is processed in overlapping tiles; ``context``
    defaults to the model's receptive radius, which makes the mosaic equal
    to the untiled result up to float rounding. Attention maps are only
    available from a whole-patch run, so ``return_attention`` ignores ``tile``.
    """
    model.eval()
    r = model.cfg.sr_factor
    images, offsets = _series_tensors(patch, stats, t_max)
    lidar = torch.tensor([lidar_offset], dtype=torch.int64)
    h, w = patch.shape
    if tile is None or return_attention:
        out = model(images, offsets, lidar, return_attention=return_attention)
        if return_attention:
            heights, attn = out
            return heights[0, 0].numpy(), attn[0].numpy()
        return out[0, 0].numpy()

    context = model.receptive_radius if context is None else context
    mosaic = np.zeros((h * r, w * r), dtype=np.float32)
    for r0, rk0, rk1 in _tile_starts(h, tile, context):
        for c0, ck0, ck1 in _tile_starts(w, tile, context):
            th, tw = min(tile, h), min(tile, w)
            pred = model(images[..., r0:r0 + th, c0:c0 + tw], offsets, lidar)[0, 0].numpy()
            mosaic[rk0 * r:rk1 * r, ck0 * r:ck1 * r] = \
                pred[(rk0 - r0) * r:(rk1 - r0) * r, (ck0 - c0) * r:(ck1 - c0) * r]
    return mosaic


def lidar_offset_for(doy: int | None, year: int | None = None) -> int:
    """Days from July 1st; ``None`` means July 1st itself."""
    return 0 if doy is None else int(doy) - july_first(year)


def output_geo(patch: SITSPatch, factor: int) -> GeoInfo:
    return patch.geo.rescaled(factor)


def bicubic_upsample(heights: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic (a = -0.75) interpolation of a height map by ``factor``."""
    if factor == 1:
        return np.asarray(heights, dtype=np.float32).copy()
    x = torch.as_tensor(np.asarray(heights, dtype=np.float64))[None, None]
    up = F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False)
    return up[0, 0].numpy()


def block_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    return np.asarray(img, dtype=np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def model_predictor(model: CanopyHeightNet, stats: ChannelStats, tile: int | None = None, t_max: int = 12):
    """Predictor for :func:`evaluate_patches` conditioned on each reference's LiDAR date."""
    def run(patch: SITSPatch, reference: ReferenceRaster) -> np.ndarray:
        offset = normalize_doy_lidar(reference.lidar_date, reference.year)
        full = predict_patch(model, patch, stats, offset, tile=tile or None, t_max=t_max)
        return crop_to_reference(full, patch, reference, model.cfg.sr_factor)
    return run


def crop_to_reference(full: np.ndarray, patch: SITSPatch, reference: ReferenceRaster, factor: int) -> np.ndarray:
    r0, c0, rh, rw = reference_offset(patch, reference, factor)
    return full[r0 * factor:(r0 + rh) * factor, c0 * factor:(c0 + rw) * factor]


def evaluate_patches(predictor, items, resolution: float | None = None, fap_bins: int | None = None) -> EvalReport:
    """Pixel-pooled metrics over ``(patch, reference)`` pairs.

    ``predictor(patch, reference)`` returns heights on the reference grid.
    The FAP curve is the mean over square predictions.
    """
    acc = MetricAccumulator()
    curves = []
    for patch, reference in items:
        pred = np.asarray(predictor(patch, reference), dtype=np.float64)
        if pred.shape != reference.shape:
            raise ValueError(f"prediction {pred.shape} does not match reference {reference.shape}")
        acc.add(pred, reference.heights, reference.valid_mask)
        if pred.shape[0] == pred.shape[1] and pred.shape[0] >= 8:
            curves.append(fap(pred, fap_bins and min(fap_bins, pred.shape[0] // 2)))
    report = acc.report(resolution)
    if curves and all(c.value.shape == curves[0].value.shape for c in curves):
        mean = np.mean([c.value for c in curves], axis=0)
        report.fap = [(float(f), float(v)) for f, v in zip(curves[0].frequency, mean)]
    return report
