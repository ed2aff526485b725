"""Date-conditioned lightweight temporal attention.

Each pixel's feature series is collapsed into one vector. Keys and values
come from the date-encoded features; the query is a projection of the
encoded reference (LiDAR) date and is therefore the same at every pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    out_dim: int = 64

    def __post_init__(self):
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(
                f"heads ({self.heads}) x head_dim ({self.head_dim}) must equal embed_dim ({self.embed_dim})")


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map, per pixel."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class TemporalAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        h, dh = cfg.heads, cfg.head_dim
        chunk = cfg.embed_dim // h
        # per-head projections of each contiguous chunk of the embedding
        self.w_key = nn.Parameter(torch.empty(h, dh, chunk))
        self.w_value = nn.Parameter(torch.empty(h, dh, chunk))
        # shared query projection, split into heads afterwards
        self.w_query = nn.Linear(cfg.embed_dim, h * dh, bias=False)
        self.out_proj = nn.Conv2d(h * dh, cfg.out_dim, 1)
        self.out_norm = ChannelLayerNorm(cfg.out_dim)
        bound = 1 / math.sqrt(chunk)
        nn.init.uniform_(self.w_key, -bound, bound)
        nn.init.uniform_(self.w_value, -bound, bound)

    def temporal_query(self, lidar_encoding: torch.Tensor) -> torch.Tensor:
        """(B, d) encoded reference date -> (B, heads, head_dim)."""
        return self.w_query(lidar_encoding).unflatten(-1, (self.cfg.heads, self.cfg.head_dim))

    def forward(self, features, s2_encodings, lidar_encoding, pad_mask=None):
        """
        features: (B, T, d, H, W); s2_encodings: (B, T, d); lidar_encoding: (B, d);
        pad_mask: (B, T) bool, True on padded dates.

        Returns the fused map (B, out_dim, H, W) and attention weights
        (B, heads, T, H, W).
        """
        cfg = self.cfg
        if features.ndim != 5 or features.shape[2] != cfg.embed_dim:
            raise ShapeError(f"expected (B, T, {cfg.embed_dim}, H, W) features, got {tuple(features.shape)}")
        b, t = features.shape[:2]
        if s2_encodings.shape != (b, t, cfg.embed_dim):
            raise ShapeError(f"date encodings {tuple(s2_encodings.shape)} do not match features")
        if lidar_encoding.shape != (b, cfg.embed_dim):
            raise ShapeError(f"reference encoding {tuple(lidar_encoding.shape)} != {(b, cfg.embed_dim)}")
        if pad_mask is None:
            pad_mask = torch.zeros(b, t, dtype=torch.bool, device=features.device)
        pad_mask = pad_mask.bool()
        if bool(pad_mask.all(dim=1).any()):
            raise ValueError("every date of a series is padded")

        x = features + s2_encodings[..., None, None]
        x = x.unflatten(2, (cfg.heads, -1))  # B T h c H W
        keys = torch.einsum("bthcxy,hkc->bthkxy", x, self.w_key)
        values = torch.einsum("bthcxy,hkc->bthkxy", x, self.w_value)
        query = self.temporal_query(lidar_encoding)  # B h k

        logits = torch.einsum("bthkxy,bhk->bhtxy", keys, query) / math.sqrt(cfg.head_dim)
        pad = pad_mask[:, None, :, None, None]
        logits = logits.masked_fill(pad, float("-inf"))
        attn = torch.softmax(logits, dim=2)
        # padded values may hold anything (even NaN); zero them explicitly
        values = values.masked_fill(pad_mask[:, :, None, None, None, None], 0.0)
        fused = torch.einsum("bhtxy,bthkxy->bhkxy", attn, values).flatten(1, 2)
        return self.out_norm(self.out_proj(fused)), attn
