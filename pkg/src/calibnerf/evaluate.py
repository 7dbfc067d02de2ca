"""Dataset generation from a run config and image-level evaluation."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .geometry import generate_rays
from .metrics import psnr, ssim
from .scene import SceneBundle, generate_synthetic_scene, select_reference_views
from .transformer import CaesarModel, render_image, render_rays


def make_scenes(data_cfg, split: str = "train") -> list:
    """Deterministic procedural scenes; train and eval splits use disjoint seeds."""
    count = data_cfg.train_scenes if split == "train" else data_cfg.eval_scenes
    offset = 0 if split == "train" else 10_000
    out = []
    for i in range(count):
        seed = data_cfg.seed * 100_000 + offset + i
        spec = replace(data_cfg.scene, seed=seed)
        bundle, _ = generate_synthetic_scene(spec, data_cfg.width, data_cfg.height, name=f"{split}_{i:03d}")
        out.append(bundle)
    return out


def references_for(model: CaesarModel, scene: SceneBundle, target_index: int, n_refs: int, exclude_target=True):
    target = scene.cameras[target_index]
    idx = select_reference_views(target, scene.cameras, n_refs, exclude_identical=exclude_target)
    refs = model.prepare(np.stack([scene.images[i] for i in idx]), [scene.cameras[i] for i in idx],
                         target.pose, scene.near, scene.far)
    return refs, idx


@torch.no_grad()
def evaluate_view(model: CaesarModel, scene: SceneBundle, target_index: int, n_refs: int,
                  batch_size: int = 1024, exclude_target: bool = True):
    """Render one view from its nearest references; returns ``(image, psnr, ssim, ref indices)``."""
    model.eval()
    refs, idx = references_for(model, scene, target_index, n_refs, exclude_target)
    img = render_image(model, scene.cameras[target_index], refs, batch_size)
    gt = scene.images[target_index]
    return img, psnr(img, gt), ssim(img, gt), idx


def evaluate_scenes(model: CaesarModel, scenes: list, n_refs: int, batch_size: int = 1024, views_per_scene: int = 0):
    """Mean PSNR/SSIM over target views of every scene."""
    ps, ss = [], []
    for scene in scenes:
        views = range(len(scene)) if views_per_scene <= 0 else range(min(views_per_scene, len(scene)))
        for t in views:
            _, p, s, _ = evaluate_view(model, scene, t, n_refs, batch_size)
            ps.append(p)
            ss.append(s)
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "views": len(ps)}


@torch.no_grad()
def heldout_psnr(model: CaesarModel, scene: SceneBundle, masks: list, n_refs: int, exclude_target: bool,
                 batch_size: int = 2048) -> float:
    """PSNR over all held-out pixels of all views, pooled into one MSE."""
    model.eval()
    sq, count = 0.0, 0
    for t, mask in enumerate(masks):
        pix = np.flatnonzero(mask.ravel())
        if not len(pix):
            continue
        refs, _ = references_for(model, scene, t, min(n_refs, len(scene) - int(exclude_target)), exclude_target)
        w = scene.width
        uv = np.stack([pix % w, pix // w], axis=-1).astype(np.float64)
        rays = generate_rays(scene.cameras[t], uv, scene.near, scene.far)
        preds = []
        for i in range(0, len(pix), batch_size):
            preds.append(render_rays(model, refs, rays.origins[i : i + batch_size], rays.directions[i : i + batch_size]))
        pred = torch.cat(preds).double().numpy()
        gt = scene.images[t].reshape(-1, 3)[pix]
        sq += float(((pred - gt) ** 2).sum())
        count += gt.size
    if count == 0:
        raise ValueError("no held-out pixels")
    mse = sq / count
    return 99.0 if mse < 1e-10 else float(10 * np.log10(1 / mse))
