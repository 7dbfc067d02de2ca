"""Photometric, inpainted perceptual and total training losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import seeded_init_

LAMBDA_CENTRAL = 1.0
LAMBDA_PERCEPTUAL = 0.001


@dataclass
class LossBreakdown:
    mse: float
    central: float
    perceptual: float
    total: float
    lambda_central: float = LAMBDA_CENTRAL
    lambda_perceptual: float = LAMBDA_PERCEPTUAL

    def as_dict(self):
        return asdict(self)


def mse_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return ((pred - truth) ** 2).mean()


class FeaturePyramid(nn.Module):
    """Fixed random three-level conv pyramid used as the perceptual feature net."""

    def __init__(self, channels=(8, 16, 32), seed: int = 1234):
        super().__init__()
        chans = (3,) + tuple(channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, 3, padding=1, padding_mode="reflect") for a, b in zip(chans[:-1], chans[1:])
        )
        seeded_init_(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list:
        """``(B, 3, H, W)`` -> list of activations, one per level."""
        feats, x = [], image
        for i, conv in enumerate(self.convs):
            if i and min(x.shape[-2:]) >= 2:
                x = F.avg_pool2d(x, 2, ceil_mode=True)
            x = F.gelu(conv(x))
            feats.append(x)
        return feats


def inpaint(truth_image: torch.Tensor, positions: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Copy of ``truth_image (H, W, 3)`` with ``pred (B, 3)`` written at ``positions (B, 2)`` given as ``(row, col)``."""
    h, w = truth_image.shape[:2]
    positions = torch.as_tensor(positions, dtype=torch.long).reshape(-1, 2)
    if len(positions) and (
        (positions < 0).any() or (positions[:, 0] >= h).any() or (positions[:, 1] >= w).any()
    ):
        raise ValueError("perceptual loss: pixel position outside the image")
    flat = truth_image.reshape(-1, 3).to(pred.dtype)
    idx = positions[:, 0] * w + positions[:, 1]
    return flat.index_put((idx,), pred).reshape(h, w, 3)


def perceptual_loss(pred: torch.Tensor, positions, truth_image, feature_net: nn.Module) -> torch.Tensor:
    """Mean squared feature distance between the inpainted and the original target image.

    Averaged over all levels of ``feature_net``; only the predicted pixels carry gradient.
    """
    truth_image = torch.as_tensor(truth_image, dtype=pred.dtype).detach()
    painted = inpaint(truth_image, positions, pred)
    if len(pred) == 0:
        return pred.sum() * 0.0
    fa = feature_net(painted.permute(2, 0, 1).unsqueeze(0).to(next(feature_net.parameters()).dtype))
    fb = feature_net(truth_image.permute(2, 0, 1).unsqueeze(0).to(fa[0].dtype))
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb)) / len(fa)


def total_loss(mse, central, perceptual, lambda_central=LAMBDA_CENTRAL, lambda_perceptual=LAMBDA_PERCEPTUAL):
    """Weighted sum ``mse + lambda_central * central + lambda_perceptual * perceptual``.

    Returns the differentiable total and a :class:`LossBreakdown` of floats.
    The sum is formed in double precision so the logged parts add up exactly.
    """
    parts = [torch.as_tensor(x).to(torch.float64) for x in (mse, central, perceptual)]
    total = parts[0] + lambda_central * parts[1] + lambda_perceptual * parts[2]
    mse_f, central_f, perc_f, total_f = (float(p.detach()) for p in (*parts, total))
    bd = LossBreakdown(mse_f, central_f, perc_f, total_f, float(lambda_central), float(lambda_perceptual))
    return total, bd
