"""Sub-pixel upsampling path and the per-pixel height regressor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass(frozen=True)
class SRConfig:
    factor: int = 1
    feat_dim: int = 64
    init_noise_scale: float = 1e-4

    def __post_init__(self):
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError(f"super-resolution factor must be a power of 2, got {self.factor}")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.factor))


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (..., C*r*r, H, W) into (..., C, H*r, W*r).

    Input channel ``c*r*r + i*r + j`` lands at output channel ``c``, offset
    ``(i, j)`` inside each r x r block.
    """
    if r == 1:
        return x
    *lead, ch, h, w = x.shape
    if ch % (r * r):
        raise ShapeError(f"{ch} channels not divisible by r^2 = {r * r}")
    c = ch // (r * r)
    x = x.reshape(*lead, c, r, r, h, w)
    n = len(lead)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return x.reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if r == 1:
        return x
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial size {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    x = x.reshape(*lead, c, h, r, w, r)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return x.reshape(*lead, c * r * r, h, w)


class PixelShuffle(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)


@torch.no_grad()
def init_subpixel_weights(weight: torch.Tensor, r: int, noise_scale: float = 0.0,
                          bias: torch.Tensor | None = None,
                          generator: torch.Generator | None = None) -> torch.Tensor:
    """Make every r*r sub-pixel group of a conv share one kernel, in place.

    The first kernel of each group is copied to the rest of the group
    (weight shape ``(C*r*r, in, k, k)``); the bias, when given, gets the
    same treatment. ``noise_scale > 0`` then multiplies each weight by
    ``1 + noise_scale * U(-1, 1)`` so the spread inside a group stays below
    ``2 * noise_scale`` relative to the shared kernel.
    """
    out_ch = weight.shape[0]
    if out_ch % (r * r):
        raise ShapeError(f"{out_ch} output channels not divisible by r^2 = {r * r}")
    base = weight[:: r * r].clone()
    weight.copy_(base.repeat_interleave(r * r, dim=0))
    if bias is not None:
        bias.copy_(bias[:: r * r].clone().repeat_interleave(r * r, dim=0))
    if noise_scale > 0:
        u = torch.rand(weight.shape, generator=generator, dtype=weight.dtype) * 2 - 1
        weight.mul_(1 + noise_scale * u.to(weight.device))
    return weight


@torch.no_grad()
def init_center_tap(conv: nn.Conv2d) -> nn.Conv2d:
    """Zero every tap except the kernel center (unit-gain uniform over the center).

    Used on convolutions that run on already shuffled maps, so that at
    initialization they act per pixel and keep r x r blocks constant.
    """
    k = conv.kernel_size
    fan_in = conv.in_channels // conv.groups
    bound = math.sqrt(3.0 / fan_in)
    conv.weight.zero_()
    conv.weight[:, :, k[0] // 2, k[1] // 2].uniform_(-bound, bound)
    if conv.bias is not None:
        conv.bias.zero_()
    return conv


class SRBlock(nn.Module):
    """3x3 conv to 4x the channels, then pixel shuffle by 2."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 4 * channels, 3, padding=1)
        self.shuffle = PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class SRUpsampler(nn.Module):
    """log2(r) chained x2 sub-pixel blocks followed by a 3x3 conv + ReLU.

    With ``factor == 1`` the module is the identity and holds no weights.
    """

    def __init__(self, cfg: SRConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        f = cfg.feat_dim
        self.blocks = nn.ModuleList([SRBlock(f) for _ in range(cfg.n_blocks)])
        self.post = (nn.Sequential(nn.Conv2d(f, f, 3, padding=1), nn.ReLU())
                     if cfg.factor > 1 else None)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None):
        for i, block in enumerate(self.blocks):
            if i > 0:
                init_center_tap(block.conv)
            init_subpixel_weights(block.conv.weight, 2, self.cfg.init_noise_scale,
                                  bias=block.conv.bias, generator=generator)
        if self.post is not None:
            init_center_tap(self.post[0])

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.post(x) if self.post is not None else x


class HeightHead(nn.Module):
    """Per-pixel MLP as 1x1 convolutions: widths ``layers`` then one output.

    Linear output, no clipping.
    """

    def __init__(self, layers=(64, 128, 64)):
        super().__init__()
        mods: list[nn.Module] = []
        for a, b in zip(layers[:-1], layers[1:]):
            mods += [nn.Conv2d(a, b, 1), nn.ReLU()]
        mods.append(nn.Conv2d(layers[-1], 1, 1))
        self.mlp = nn.Sequential(*mods)
        self.in_channels = layers[0]

    def forward(self, x):
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} channels, got {x.shape[-3]}")
        return self.mlp(x)
