"""Training objectives on masked height maps.

All losses take ``pred``, ``target`` and ``valid`` of shape (B, H, W) or
(B, 1, H, W). Every loss is averaged inside each patch first and then
across patches, so a patch with few valid pixels weighs as much as a
densely valid one. Masked pixels never reach the reduction: they are
selected away with ``torch.where`` rather than multiplied by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError


@dataclass(frozen=True)
class LossConfig:
    w_height: float = 1.0
    w_wgdl: float = 1.0
    lambda_min: float = 0.1
    gdl_exponent: int = 2

    def __post_init__(self):
        if self.w_height < 0 or self.w_wgdl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_height == 0 and self.w_wgdl == 0:
            raise ValueError("at least one loss weight must be positive")
        if not 0 < self.lambda_min <= 1:
            raise ValueError("lambda_min must lie in (0, 1]")
        if self.gdl_exponent not in (1, 2):
            raise ValueError("gdl_exponent must be 1 or 2")


def _squeeze(pred, target, valid):
    pred, target, valid = (x[:, 0] if x.ndim == 4 else x for x in (pred, target, valid))
    if pred.shape != target.shape or pred.shape != valid.shape or pred.ndim != 3:
        raise ShapeError(f"pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"valid {tuple(valid.shape)} must all be (B, H, W)")
    return pred, target, valid.bool()


def _masked_patch_mean(values, mask):
    """Per-patch mean over ``mask``; returns (means, counts)."""
    counts = mask.flatten(1).sum(1)
    sums = torch.where(mask, values, torch.zeros_like(values)).flatten(1).sum(1)
    means = sums / counts.clamp(min=1)
    return means, counts


def patch_balanced_mae(pred, target, valid):
    """Mean over patches of the per-patch masked MAE.

    Patches without valid pixels are left out of the outer mean.
    """
    pred, target, valid = _squeeze(pred, target, valid)
    means, counts = _masked_patch_mean((pred - target).abs(), valid)
    has = counts > 0
    if not bool(has.any()):
        raise ValueError("no valid pixels in the batch")
    return means[has].mean()


def image_gradients(img):
    """Backward differences along columns (x) and rows (y).

    For an (..., H, W) input returns ``gx`` of shape (..., H, W-1) with
    ``gx[..., i, j-1] = X[i, j] - X[i, j-1]`` and ``gy`` of shape
    (..., H-1, W). The undefined first column/row is simply not produced.
    """
    gx = img[..., :, 1:] - img[..., :, :-1]
    gy = img[..., 1:, :] - img[..., :-1, :]
    return gx, gy


def _gradient_masks(valid):
    return valid[..., :, 1:] & valid[..., :, :-1], valid[..., 1:, :] & valid[..., :-1, :]


def gradient_weights(target_grad, mask, lambda_min: float):
    """lambda_min + (1 - lambda_min) * |g| / max|g|, max per patch over ``mask``.

    A patch whose masked gradients are all zero gets ``lambda_min`` everywhere.
    """
    mag = target_grad.abs()
    if mag.numel() == 0:
        return torch.full_like(mag, lambda_min)
    peak = torch.where(mask, mag, torch.zeros_like(mag)).flatten(1).amax(1)
    peak = peak.view(-1, *([1] * (mag.ndim - 1)))
    ratio = torch.where(peak > 0, mag / torch.where(peak > 0, peak, torch.ones_like(peak)),
                        torch.zeros_like(mag))
    return lambda_min + (1.0 - lambda_min) * ratio


def _direction_term(pg, tg, mask, lambda_min, exponent):
    diff = (pg.abs() - tg.abs()).abs()
    if exponent == 2:
        diff = diff * diff
    w = gradient_weights(tg, mask, lambda_min)
    return _masked_patch_mean(w * diff, mask)


def wgdl(pred, target, valid, lambda_min: float = 0.1, exponent: int = 2):
    """Weighted gradient difference loss.

    Per patch: the masked mean of ``W * ||grad X| - |grad Y||^exponent`` for
    each direction, summed and halved. A gradient position counts only when
    both pixels of the difference are valid; a direction without any valid
    position contributes zero. Patches with no valid position in either
    direction drop out of the batch mean.
    """
    pred, target, valid = _squeeze(pred, target, valid)
    pgx, pgy = image_gradients(pred)
    tgx, tgy = image_gradients(target)
    mx, my = _gradient_masks(valid)
    lx, nx = _direction_term(pgx, tgx, mx, lambda_min, exponent)
    ly, ny = _direction_term(pgy, tgy, my, lambda_min, exponent)
    per_patch = (lx + ly) / 2
    has = (nx + ny) > 0
    if not bool(has.any()):
        return pred.sum() * 0.0
    return per_patch[has].mean()


def gdl(pred, target, valid, exponent: int = 2):
    """Unweighted gradient difference loss, same masking and reduction as :func:`wgdl`."""
    pred, target, valid = _squeeze(pred, target, valid)
    terms = []
    for pg, tg, mask in zip(image_gradients(pred), image_gradients(target), _gradient_masks(valid)):
        diff = (pg.abs() - tg.abs()).abs()
        terms.append(_masked_patch_mean(diff * diff if exponent == 2 else diff, mask))
    (lx, nx), (ly, ny) = terms
    has = (nx + ny) > 0
    if not bool(has.any()):
        return pred.sum() * 0.0
    return ((lx + ly) / 2)[has].mean()


def total_loss(pred, target, valid, cfg: LossConfig = LossConfig()):
    """Weighted sum of the height MAE and WGDL; returns (total, components)."""
    parts = {}
    total = pred.new_zeros(())
    if cfg.w_height:
        parts["height"] = patch_balanced_mae(pred, target, valid)
        total = total + cfg.w_height * parts["height"]
    if cfg.w_wgdl:
        parts["wgdl"] = wgdl(pred, target, valid, cfg.lambda_min, cfg.gdl_exponent)
        total = total + cfg.w_wgdl * parts["wgdl"]
    return total, parts
