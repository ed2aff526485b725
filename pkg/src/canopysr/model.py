"""Full height-regression network: per-date features, date-conditioned
temporal fusion, sub-pixel upsampling and the MLP head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import torch
import torch.nn as nn

from .backbone import BackboneConfig, RDBFeatureExtractor
from .datamodel import N_INPUT_CHANNELS
from .encoders import DEFAULT_TAU, sinusoidal_encoding
from .superres import HeightHead, SRConfig, SRUpsampler
from .temporal import AttentionConfig, TemporalAttention

# resolution (m) -> (dense blocks, layers per block, SR factor)
RESOLUTION_PRESETS = {
    10.0: (4, 4, 1),
    5.0: (5, 5, 2),
    2.5: (5, 5, 4),
}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = N_INPUT_CHANNELS
    n_blocks: int = 5
    layers_per_block: int = 5
    growth: int = 24
    feat_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    fused_dim: int = 64
    tau: float = DEFAULT_TAU
    sr_factor: int = 1
    init_noise_scale: float = 1e-4
    mlp_layers: tuple[int, ...] = (64, 128, 64)

    def __post_init__(self):
        object.__setattr__(self, "mlp_layers", tuple(int(v) for v in self.mlp_layers))
        if self.mlp_layers[0] != self.fused_dim:
            raise ValueError("first MLP width must equal fused_dim")
        if self.feat_dim % 2:
            raise ValueError("feat_dim doubles as the date-encoding size and must be even")
        # validate the sub-configs eagerly
        self.backbone, self.attention, self.sr  # noqa: B018

    @classmethod
    def for_resolution(cls, resolution: float, **overrides) -> "ModelConfig":
        try:
            n_blocks, layers, factor = RESOLUTION_PRESETS[float(resolution)]
        except KeyError:
            raise ValueError(f"resolution must be one of {sorted(RESOLUTION_PRESETS)} m") from None
        base = dict(n_blocks=n_blocks, layers_per_block=layers, sr_factor=factor)
        base.update(overrides)
        return cls(**base)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.n_blocks, self.layers_per_block, self.growth, self.feat_dim)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.feat_dim, self.heads, self.head_dim, self.fused_dim)

    @property
    def sr(self) -> SRConfig:
        return SRConfig(self.sr_factor, self.fused_dim, self.init_noise_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_layers"] = list(self.mlp_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class CanopyHeightNet(nn.Module):
    """(B, T, C, H, W) series -> (B, 1, rH, rW) canopy heights.

    Date inputs are day offsets (Sentinel-2 from Jan 1st, reference from
    July 1st); padded dates are flagged in ``pad_mask``.
    """

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        gen = None
        if seed is not None:
            torch.manual_seed(seed)
            gen = torch.Generator().manual_seed(seed)
        self.backbone = RDBFeatureExtractor(cfg.backbone)
        self.temporal = TemporalAttention(cfg.attention)
        self.upsampler = SRUpsampler(cfg.sr, generator=gen)
        self.head = HeightHead(cfg.mlp_layers)

    @property
    def receptive_radius(self) -> int:
        """Input pixels of context per side that can influence one output pixel."""
        return self.backbone.receptive_radius + (2 if self.cfg.sr_factor > 1 else 0)

    def encode_dates(self, offsets: torch.Tensor) -> torch.Tensor:
        return sinusoidal_encoding(offsets, self.cfg.feat_dim, self.cfg.tau)

    def forward(self, images, s2_offsets, lidar_offset, pad_mask=None, return_attention=False):
        dtype = images.dtype
        feats = self.backbone(images)
        s2_enc = self.encode_dates(s2_offsets.to(dtype))
        lidar_enc = self.encode_dates(lidar_offset.to(dtype))
        fused, attn = self.temporal(feats, s2_enc, lidar_enc, pad_mask)
        heights = self.head(self.upsampler(fused))
        return (heights, attn) if return_attention else heights


def crop_margin(x: torch.Tensor, margin: int) -> torch.Tensor:
    """Drop ``margin`` pixels from each side of the last two axes."""
    if margin == 0:
        return x
    return x[..., margin:-margin, margin:-margin]
