"""Shared convolutional encoder: per-pixel feature maps and per-view global vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    pixel_feature_dim: int = 64
    semantic_dim: int = 96
    downsample_stages: int = 3
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.pixel_feature_dim < 1:
            raise ValueError("pixel_feature_dim must be >= 1")
        if self.semantic_dim < 1:
            raise ValueError("semantic_dim must be >= 1")
        if self.downsample_stages < 1:
            raise ValueError("downsample_stages must be >= 1")

    @property
    def stride(self) -> int:
        return 2 ** self.downsample_stages


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Uniform fan-in initialization of every conv/linear layer, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound)


def global_average_pool(grid: torch.Tensor) -> torch.Tensor:
    """Channelwise mean over the two trailing spatial axes of ``(..., D, H, W)``."""
    if grid.dim() < 3 or grid.shape[-1] < 1 or grid.shape[-2] < 1:
        raise ValueError(f"global_average_pool needs a non-empty (..., D, H, W) grid, got {tuple(grid.shape)}")
    return grid.mean(dim=(-2, -1))


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")
        self.down = nn.Conv2d(cout, cout, 3, stride=2, padding=1, padding_mode="reflect")

    def forward(self, x):
        return self.down(F.gelu(self.conv(x)))


class Encoder(nn.Module):
    """Images ``(N, 3, H, W)`` to feature maps ``(N, L, H', W')`` and vectors ``(N, C)``.

    The feature map is a 1x1 projection of the last block's output (the
    bottleneck grid, stride ``2**downsample_stages``); the vector is a linear
    layer on its global average.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = [3] + [cfg.base_channels * 2**i for i in range(cfg.downsample_stages)]
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.to_pixel = nn.Conv2d(chans[-1], cfg.pixel_feature_dim, 1)
        self.fc = nn.Linear(chans[-1], cfg.semantic_dim)
        seeded_init_(self, cfg.seed)

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def bottleneck(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for i, blk in enumerate(self.blocks):
            if i:
                x = F.gelu(x)
            x = blk(x)
        return x

    def forward(self, images: torch.Tensor):
        if not torch.isfinite(images).all():
            raise ValueError("encoder input contains non-finite values")
        b = self.bottleneck(images)
        return self.to_pixel(F.gelu(b)), self.fc(global_average_pool(b))


def feature_coords(u: torch.Tensor, v: torch.Tensor, stride: int):
    """Map image pixel-center coordinates onto a stride-``stride`` grid's cell centers."""
    return (u + 0.5) / stride - 0.5, (v + 0.5) / stride - 0.5


def bilinear_sample(grid: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Sample ``(N, D, H, W)`` grids at grid coordinates ``x, y`` of shape ``(N, ...)``.

    Queries inside the covered area ``[-0.5, W - 0.5] x [-0.5, H - 0.5]`` are
    bilinearly interpolated, clamping to the border half-cell; outside queries
    give zeros and ``valid = False``.  Returns ``(values (N, ..., D), valid)``.
    """
    n, d, h, w = grid.shape
    lead = x.shape[1:]
    valid = (x >= -0.5) & (x <= w - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    xc = x.clamp(0, w - 1)
    yc = y.clamp(0, h - 1)
    gx = 2 * xc / max(w - 1, 1) - 1 if w > 1 else torch.zeros_like(xc)
    gy = 2 * yc / max(h - 1, 1) - 1 if h > 1 else torch.zeros_like(yc)
    g = torch.stack([gx, gy], dim=-1).reshape(n, 1, -1, 2).to(grid.dtype)
    out = F.grid_sample(grid, g, mode="bilinear", align_corners=True)  # (N, D, 1, P)
    out = out.reshape(n, d, *lead).movedim(1, -1)
    return out * valid.unsqueeze(-1).to(out.dtype), valid


def sample_pixel_feature(fmap: torch.Tensor, stride: int, u, v):
    """Feature of a single ``(D, H', W')`` map at image coordinates ``(u, v)``."""
    u = torch.as_tensor(u, dtype=fmap.dtype).reshape(1, -1)
    v = torch.as_tensor(v, dtype=fmap.dtype).reshape(1, -1)
    x, y = feature_coords(u, v, stride)
    vals, valid = bilinear_sample(fmap.unsqueeze(0), x, y)
    return vals[0], valid[0]
