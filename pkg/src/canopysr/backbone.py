"""Residual dense feature extractor applied to every date independently.

Shallow feature extraction (two 3x3 convs), a chain of residual dense
blocks, and global fusion of all block outputs with a residual connection
to the first shallow conv. There is no upsampling stage here.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 17
    n_blocks: int = 5
    layers_per_block: int = 5
    growth: int = 24
    feat_dim: int = 64

    def __post_init__(self):
        for name in ("in_channels", "n_blocks", "layers_per_block", "growth", "feat_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, growth, 3, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return torch.cat((x, self.act(self.conv(x))), dim=1)


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int, n_layers: int):
        super().__init__()
        self.layers = nn.Sequential(*[DenseLayer(channels + i * growth, growth) for i in range(n_layers)])
        self.fusion_channels = channels + n_layers * growth
        # local feature fusion back to the block width
        self.fusion = nn.Conv2d(self.fusion_channels, channels, 1)
        assert self.fusion.in_channels == channels + n_layers * growth

    def forward(self, x):
        return self.fusion(self.layers(x)) + x


class RDBFeatureExtractor(nn.Module):
    """Maps (B, T, C, H, W) image series to (B, T, F, H, W) feature series."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.feat_dim
        self.sfe1 = nn.Conv2d(cfg.in_channels, f, 3, padding=1)
        self.sfe2 = nn.Conv2d(f, f, 3, padding=1)
        self.blocks = nn.ModuleList(
            [ResidualDenseBlock(f, cfg.growth, cfg.layers_per_block) for _ in range(cfg.n_blocks)]
        )
        self.global_fusion = nn.Sequential(
            nn.Conv2d(cfg.n_blocks * f, f, 1),
            nn.Conv2d(f, f, 3, padding=1),
        )

    @property
    def receptive_radius(self) -> int:
        """Pixels of context each output pixel depends on, per side."""
        return 2 + self.cfg.n_blocks * self.cfg.layers_per_block + 1

    def forward_images(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) images, got {tuple(x.shape)}")
        shallow = self.sfe1(x)
        h = self.sfe2(shallow)
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return self.global_fusion(torch.cat(outs, dim=1)) + shallow

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5:
            raise ShapeError(f"expected (B, T, C, H, W), got {tuple(x.shape)}")
        b, t = x.shape[:2]
        feats = self.forward_images(x.flatten(0, 1))
        return feats.unflatten(0, (b, t))
