"""Stacked view/ray transformers conditioned on scene-level semantic vectors.

Each stage fuses the projected reference features of every sample point
(view transformer), mixes in the stage's scene vector, then lets the points
of a ray attend to one another (ray transformer).  The final tokens are
pooled along the ray and squashed to RGB; there is no density or volume
rendering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Encoder, EncoderConfig, bilinear_sample, feature_coords, seeded_init_
from .geometry import Camera, compose_relative_rotation, generate_rays, sample_depths
from .semantic import SemanticRefiner, aggregate, calibrate, concat_global_local


class NumericError(FloatingPointError):
    pass


@dataclass
class StackConfig:
    stages: int = 4
    heads: int = 4
    points_per_ray: int = 32
    ffn_width: int = 128
    encoding_freqs: int = 6
    use_semantic: bool = True
    calibrate: bool = True
    refine: bool = True
    refine_attention: str = "joint"

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.points_per_ray < 1:
            raise ValueError("points_per_ray must be >= 1")


def sinusoidal_encoding(x: torch.Tensor, freqs: int) -> torch.Tensor:
    """``[x, sin(2^k x), cos(2^k x)]`` for ``k < freqs``."""
    scales = 2.0 ** torch.arange(freqs, dtype=x.dtype)
    xs = x.unsqueeze(-1) * scales
    parts = [x, torch.sin(xs).flatten(-2), torch.cos(xs).flatten(-2)]
    return torch.cat(parts, dim=-1)


def depth_position_encoding(m: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sinusoidal table over sample index, shape ``(m, dim)``."""
    pos = torch.arange(m, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(m, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class ViewTransformer(nn.Module):
    """Masked multi-head attention from a point's token over its ``N`` view tokens."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"pixel feature length {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def forward(self, views: torch.Tensor, mask: torch.Tensor, query: torch.Tensor):
        """``views (..., N, L)``, ``mask (..., N)``, ``query (..., L)`` -> ``(fused (..., L), fallback (...))``.

        Invalid views are excluded from the softmax; a point with no valid
        view gets a zero token and ``fallback = True``.
        """
        h = self.heads
        lead = views.shape[:-2]
        n, dim = views.shape[-2:]
        dh = dim // h
        q = self.q(self.norm(query)).reshape(*lead, h, dh)
        k = self.k(views).reshape(*lead, n, h, dh)
        v = self.v(views).reshape(*lead, n, h, dh)
        # N is small: broadcast-and-reduce beats batched matmul here
        logits = (q.unsqueeze(-3) * k).sum(-1) / math.sqrt(dh)  # (..., N, h)
        m = mask.unsqueeze(-1)
        logits = logits.masked_fill(~m, -1e30 if logits.dtype == torch.float64 else -1e9)
        w = torch.softmax(logits, dim=-2) * m.to(logits.dtype)
        fused = (w.unsqueeze(-1) * v).sum(-3).reshape(*lead, dim)
        fallback = ~mask.any(dim=-1)
        return fused, fallback


class SemanticAugment(nn.Module):
    """Concatenate a point token with the scene vector and map back to ``L`` dims.

    Two-layer MLP ``L+C -> L+C -> L`` added to the incoming token.
    """

    def __init__(self, pixel_dim, semantic_dim):
        super().__init__()
        self.fc1 = nn.Linear(pixel_dim + semantic_dim, pixel_dim + semantic_dim)
        self.fc2 = nn.Linear(pixel_dim + semantic_dim, pixel_dim)

    def forward(self, token, semantic):
        return token + self.fc2(F.gelu(self.fc1(concat_global_local(token, semantic))))

    def fast_forward(self, token, semantic):
        """Same map as :meth:`forward`, folding the constant semantic half of ``fc1`` into its bias."""
        dim = token.shape[-1]
        w = self.fc1.weight
        bias = self.fc1.bias + semantic @ w[:, dim:].T
        return token + self.fc2(F.gelu(F.linear(token, w[:, :dim], bias)))


class RayTransformer(nn.Module):
    """Pre-norm self-attention along the ray plus a feed-forward, both residual."""

    def __init__(self, dim, heads, ffn_width):
        super().__init__()
        if dim % heads:
            raise ValueError(f"pixel feature length {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ffn = FeedForward(dim, ffn_width)

    def forward(self, x: torch.Tensor, pos: torch.Tensor | None = None):
        *lead, m, dim = x.shape
        h, dh = self.heads, dim // self.heads
        y = self.norm(x)
        if pos is not None:
            y = y + pos
        q, k, v = self.qkv(y).reshape(*lead, m, 3, h, dh).movedim(-4, -2).unbind(-4)
        att = F.scaled_dot_product_attention(q, k, v)  # (..., h, M, dh)
        x = x + self.out(att.movedim(-3, -2).reshape(*lead, m, dim))
        return x + self.ffn(x)


class Stage(nn.Module):
    def __init__(self, dim, semantic_dim, cfg: StackConfig):
        super().__init__()
        self.view = ViewTransformer(dim, cfg.heads)
        self.view_ffn = FeedForward(dim, cfg.ffn_width)
        self.augment = SemanticAugment(dim, semantic_dim) if cfg.use_semantic else None
        self.ray = RayTransformer(dim, cfg.heads, cfg.ffn_width)


@dataclass
class References:
    """Everything the stack needs from the reference views for one target camera."""

    images: torch.Tensor        # (N, 3, H, W)
    feature_maps: torch.Tensor  # (N, L, H', W')
    stride: int
    rotations: torch.Tensor     # (N, 3, 3) world-to-camera
    translations: torch.Tensor  # (N, 3)
    intrinsics: torch.Tensor    # (N, 4) fx, fy, cx, cy
    semantics: list | None      # per-stage scene vectors, or None without the semantic path
    per_view: torch.Tensor | None  # per-view vectors entering the scene average
    near: float
    far: float


class CaesarModel(nn.Module):
    """Encoder, semantic refiner and the transformer stack as one module."""

    def __init__(self, enc_cfg: EncoderConfig, stack_cfg: StackConfig, seed: int = 0):
        super().__init__()
        if stack_cfg.use_semantic and stack_cfg.calibrate and enc_cfg.semantic_dim % 3:
            raise ValueError(f"calibration needs a semantic length divisible by 3, got {enc_cfg.semantic_dim}")
        self.enc_cfg = enc_cfg
        self.cfg = stack_cfg
        dim = enc_cfg.pixel_feature_dim
        c = enc_cfg.semantic_dim
        self.encoder = Encoder(enc_cfg)
        enc_dim = 3 * (1 + 2 * stack_cfg.encoding_freqs)
        self.view_in = nn.Linear(dim + 3, dim)
        self.enc_in = nn.Linear(2 * enc_dim, dim)
        self.stages = nn.ModuleList(Stage(dim, c, stack_cfg) for _ in range(stack_cfg.stages))
        if stack_cfg.use_semantic and stack_cfg.refine:
            self.refiner = SemanticRefiner(c, stack_cfg.stages, stack_cfg.heads, stack_cfg.refine_attention)
        else:
            self.refiner = None
        self.final_norm = nn.LayerNorm(dim)
        self.pool = nn.Linear(dim, 1)
        self.head = nn.Linear(dim, 3)
        gen_seed = seed * 1000 + 17
        for i, mod in enumerate([self.view_in, self.enc_in, self.stages, self.refiner, self.pool, self.head]):
            if mod is not None:
                seeded_init_(mod, gen_seed + i)
        # instrumentation: stage_hook(k, scene_vector) before each augment,
        # token_hook(k, tokens (B, M, L)) after each stage
        self.stage_hook: Callable | None = None
        self.token_hook: Callable | None = None

    # parameter groups for the optimizer
    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def rest_parameters(self):
        enc = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    @property
    def dtype(self):
        return self.head.weight.dtype

    def prepare(self, ref_images, ref_cameras, target_pose, near, far) -> References:
        """Encode reference images ``(N, H, W, 3)`` and build per-stage scene vectors."""
        dt = self.dtype
        imgs = torch.as_tensor(np.asarray(ref_images), dtype=dt).permute(0, 3, 1, 2).contiguous()
        fmaps, svecs = self.encoder(imgs)
        rots = torch.as_tensor(np.stack([c.pose.rotation for c in ref_cameras]), dtype=dt)
        trans = torch.as_tensor(np.stack([c.pose.translation for c in ref_cameras]), dtype=dt)
        intr = torch.as_tensor(
            [[c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy] for c in ref_cameras], dtype=dt
        )
        semantics = per_view = None
        if self.cfg.use_semantic:
            per_view = svecs
            if self.cfg.calibrate:
                rel = relative_rotations(target_pose, ref_cameras)
                per_view = calibrate(svecs, torch.as_tensor(rel, dtype=dt))
            initial = aggregate(per_view)
            if self.refiner is not None:
                semantics = self.refiner.stage_vectors(initial, svecs)
            else:
                semantics = [initial] * self.cfg.stages
        return References(imgs, fmaps, self.encoder.stride, rots, trans, intr, semantics, per_view, near, far)

    def project_features(self, refs: References, points: torch.Tensor):
        """Per-view tokens ``(..., N, L+3)`` and validity ``(..., N)`` for world points ``(..., 3)``."""
        lead = points.shape[:-1]
        p = points.reshape(1, -1, 3)
        cam = torch.einsum("nij,npj->npi", refs.rotations, p.expand(len(refs.rotations), -1, -1))
        cam = cam + refs.translations[:, None, :]
        z = cam[..., 2]
        safe_z = torch.where(z.abs() > 1e-9, z, torch.ones_like(z))
        fx, fy, cx, cy = (refs.intrinsics[:, i : i + 1] for i in range(4))
        u = fx * cam[..., 0] / safe_z + cx
        v = fy * cam[..., 1] / safe_z + cy
        x, y = feature_coords(u, v, refs.stride)
        feats, _ = bilinear_sample(refs.feature_maps, x, y)
        rgb, in_image = bilinear_sample(refs.images, u, v)
        valid = in_image & (z > 0)
        tokens = torch.cat([feats, rgb], dim=-1) * valid.unsqueeze(-1).to(feats.dtype)
        n = tokens.shape[0]
        tokens = tokens.reshape(n, *lead, -1).movedim(0, -2)
        valid = valid.reshape(n, *lead).movedim(0, -1)
        return tokens, valid

    def forward(self, refs: References, origins: torch.Tensor, directions: torch.Tensor, depths: torch.Tensor):
        """RGB ``(B, 3)`` for rays ``origins, directions (B, 3)`` sampled at ``depths (B, M)``."""
        dt = self.dtype
        origins = torch.as_tensor(origins, dtype=dt)
        directions = torch.as_tensor(directions, dtype=dt)
        depths = torch.as_tensor(depths, dtype=dt)
        points = origins[:, None, :] + depths[..., None] * directions[:, None, :]
        tokens, valid = self.project_features(refs, points)
        f = self.cfg.encoding_freqs
        pos_enc = sinusoidal_encoding(points, f)
        dir_enc = sinusoidal_encoding(directions, f)[:, None, :].expand_as(pos_enc)
        shared = self.enc_in(torch.cat([pos_enc, dir_enc], dim=-1))
        views = self.view_in(tokens) + shared.unsqueeze(-2)
        vmask = valid.unsqueeze(-1).to(dt)
        x = (views * vmask).sum(-2) / vmask.sum(-2).clamp_min(1.0)
        pe = depth_position_encoding(depths.shape[1], x.shape[-1], dt)
        for k, stage in enumerate(self.stages):
            fused, _ = stage.view(views, valid, x)
            x = x + fused
            x = x + stage.view_ffn(x)
            if stage.augment is not None:
                s_k = refs.semantics[k]
                if self.stage_hook is not None:
                    self.stage_hook(k, s_k)
                x = stage.augment.fast_forward(x, s_k)
            x = stage.ray(x, pe)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after stage {k}")
            if self.token_hook is not None:
                self.token_hook(k, x)
        y = self.final_norm(x)
        w = torch.softmax(self.pool(y).squeeze(-1), dim=-1)
        pooled = torch.einsum("bm,bmd->bd", w, y)
        return torch.sigmoid(self.head(pooled))


def prepare_references(model: CaesarModel, images, cameras, target: Camera, near, far) -> References:
    return model.prepare(np.stack(images), cameras, target.pose, near, far)


def render_ray(model: CaesarModel, refs: References, origin, direction, points: int | None = None):
    """Colour of a single ray; see :func:`render_rays`."""
    return render_rays(model, refs, np.asarray(origin)[None], np.asarray(direction)[None], points)[0]


def render_rays(model: CaesarModel, refs: References, origins, directions, points: int | None = None,
                mode: str = "midpoint", seed: int | None = None) -> torch.Tensor:
    m = points or model.cfg.points_per_ray
    depths = sample_depths(refs.near, refs.far, m, mode, seed, n_rays=len(origins))
    return model(refs, origins, directions, depths)


@torch.no_grad()
def render_image(model: CaesarModel, target: Camera, refs: References, batch_size: int = 1024) -> np.ndarray:
    """Render every pixel of ``target`` in ray batches; returns ``(H, W, 3)``."""
    rays = generate_rays(target, target.pixel_grid(), refs.near, refs.far)
    out = []
    for i in range(0, len(rays), batch_size):
        out.append(render_rays(model, refs, rays.origins[i : i + batch_size], rays.directions[i : i + batch_size]))
    rgb = torch.cat(out).cpu().numpy().astype(np.float64)
    return rgb.reshape(target.height, target.width, 3)


def relative_rotations(target_pose, cameras) -> np.ndarray:
    return np.stack([compose_relative_rotation(target_pose, c.pose) for c in cameras])
