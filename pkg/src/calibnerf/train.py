"""Training loop: ray sampling, reference selection, losses and the Adam schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import EncoderConfig
from .geometry import generate_rays
from .losses import LAMBDA_CENTRAL, LAMBDA_PERCEPTUAL, FeaturePyramid, LossBreakdown, mse_loss, perceptual_loss, total_loss
from .scene import SceneBundle, select_reference_views
from .semantic import central_loss
from .transformer import CaesarModel, NumericError, StackConfig, render_rays


@dataclass
class TrainConfig:
    iterations: int = 5000
    rays_per_iteration: int = 512
    lr_encoder: float = 0.001
    lr_rest: float = 0.0005
    halve_every: int = 2000
    lambda_central: float = LAMBDA_CENTRAL
    lambda_perceptual: float = LAMBDA_PERCEPTUAL
    ref_views_min: int = 2
    ref_views_max: int = 4
    exclude_target: bool = True
    holdout_fraction: float = 0.0
    holdout_seed: int = 99
    seed: int = 0
    precision: str = "single"
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lr_encoder < 0 or self.lr_rest < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lambda_central < 0 or self.lambda_perceptual < 0:
            raise ValueError("loss weights must be non-negative")
        if self.halve_every < 1:
            raise ValueError("halve_every must be >= 1")
        if not 1 <= self.ref_views_min <= self.ref_views_max:
            raise ValueError("need 1 <= ref_views_min <= ref_views_max")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double" else torch.float32


def lr_at(iteration: int, cfg: TrainConfig):
    """Encoder and remaining-parameter learning rates, halved every ``halve_every`` steps."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    scale = 0.5 ** (iteration // cfg.halve_every)
    return cfg.lr_encoder * scale, cfg.lr_rest * scale


def holdout_mask(height: int, width: int, fraction: float, seed: int, scene_index: int, view_index: int):
    """Boolean ``(H, W)`` mask of pixels never used for supervision."""
    if fraction <= 0:
        return np.zeros((height, width), dtype=bool)
    rng = np.random.default_rng([seed, scene_index, view_index])
    return rng.uniform(size=(height, width)) < fraction


@dataclass
class TrainState:
    model: CaesarModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)


def build_model(enc_cfg: EncoderConfig, stack_cfg: StackConfig, train_cfg: TrainConfig) -> CaesarModel:
    model = CaesarModel(enc_cfg, stack_cfg, seed=train_cfg.seed)
    return model.to(train_cfg.dtype)


def make_optimizer(model: CaesarModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": model.encoder_parameters(), "lr": cfg.lr_encoder, "name": "encoder"},
            {"params": model.rest_parameters(), "lr": cfg.lr_rest, "name": "rest"},
        ]
    )


def new_state(enc_cfg: EncoderConfig, stack_cfg: StackConfig, train_cfg: TrainConfig) -> TrainState:
    model = build_model(enc_cfg, stack_cfg, train_cfg)
    return TrainState(model, make_optimizer(model, train_cfg), train_cfg)


class Trainer:
    """Owns the perceptual feature net and the per-scene held-out masks."""

    def __init__(self, state: TrainState, scenes: list):
        if not scenes:
            raise ValueError("no training scenes")
        self.state = state
        self.scenes = scenes
        cfg = state.config
        self.feature_net = FeaturePyramid().to(cfg.dtype)
        self.masks = [
            [holdout_mask(s.height, s.width, cfg.holdout_fraction, cfg.holdout_seed, i, j) for j in range(len(s))]
            for i, s in enumerate(scenes)
        ]

    def sample_batch(self, rng: np.random.Generator):
        cfg = self.state.config
        si = int(rng.integers(len(self.scenes)))
        scene: SceneBundle = self.scenes[si]
        ti = int(rng.integers(len(scene)))
        target = scene.cameras[ti]
        available = len(scene) - 1 if cfg.exclude_target else len(scene)
        hi = min(cfg.ref_views_max, available)
        lo = min(cfg.ref_views_min, hi)
        if hi < 1:
            raise ValueError(f"scene {scene.name} has too few views for reference selection")
        n_refs = int(rng.integers(lo, hi + 1))
        refs = select_reference_views(target, scene.cameras, n_refs, exclude_identical=cfg.exclude_target)
        allowed = np.flatnonzero(~self.masks[si][ti].ravel())
        count = min(cfg.rays_per_iteration, len(allowed))
        pix = np.sort(rng.choice(allowed, size=count, replace=False))
        return si, ti, refs, pix

    def train_step(self) -> LossBreakdown:
        st = self.state
        cfg = st.config
        model = st.model
        rng = np.random.default_rng([cfg.seed, st.iteration])
        si, ti, ref_idx, pix = self.sample_batch(rng)
        scene = self.scenes[si]
        target = scene.cameras[ti]
        lr_enc, lr_rest = lr_at(st.iteration, cfg)
        for group, lr in zip(st.optimizer.param_groups, (lr_enc, lr_rest)):
            group["lr"] = lr

        model.train()
        refs = model.prepare(
            np.stack([scene.images[i] for i in ref_idx]), [scene.cameras[i] for i in ref_idx],
            target.pose, scene.near, scene.far,
        )
        w = scene.width
        rows, cols = pix // w, pix % w
        uv = np.stack([cols, rows], axis=-1).astype(np.float64)
        rays = generate_rays(target, uv, scene.near, scene.far)
        pred = render_rays(model, refs, rays.origins, rays.directions, mode="stratified",
                           seed=int(rng.integers(2**31)))
        truth = torch.as_tensor(scene.images[ti].reshape(-1, 3)[pix], dtype=pred.dtype)
        l_mse = mse_loss(pred, truth)
        l_central = central_loss(refs.per_view) if refs.per_view is not None else pred.new_zeros(())
        if cfg.lambda_perceptual > 0:
            l_perc = perceptual_loss(pred, np.stack([rows, cols], axis=-1), scene.images[ti], self.feature_net)
        else:
            l_perc = pred.new_zeros(())
        total, bd = total_loss(l_mse, l_central, l_perc, cfg.lambda_central, cfg.lambda_perceptual)
        if not math.isfinite(bd.total):
            raise NumericError(
                f"non-finite loss at iteration {st.iteration}: mse={bd.mse} central={bd.central} "
                f"perceptual={bd.perceptual} (scene {scene.name}, view {ti}, refs {ref_idx})"
            )
        st.optimizer.zero_grad(set_to_none=True)
        total.backward()
        st.optimizer.step()
        st.iteration += 1
        st.history.append({"iteration": st.iteration, **bd.as_dict(), "lr_encoder": lr_enc, "lr_rest": lr_rest})
        return bd

    def train(self, iterations: int, callback=None) -> list:
        out = []
        for _ in range(iterations):
            bd = self.train_step()
            out.append(bd)
            if callback is not None and callback(self.state, bd) is False:
                break
        return out
