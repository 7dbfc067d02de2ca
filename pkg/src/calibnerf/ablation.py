"""Ablation grid over semantic length, sequential refinement and calibration."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .evaluate import evaluate_scenes, make_scenes
from .train import Trainer, new_state


@dataclass(frozen=True)
class Variant:
    name: str
    semantic_length: int | None  # None: no semantic path
    seq: bool = False
    cali: bool = False


# row order follows the length sweep, then the refinement/calibration toggles at length 96
VARIANTS = (
    Variant("baseline", None),
    Variant("+32", 32),
    Variant("+64", 64),
    Variant("+96", 96),
    Variant("+128", 128),
    Variant("+96 Seq.", 96, seq=True),
    Variant("+96 Cali.", 96, cali=True),
    Variant("+96 Seq. Cali.", 96, seq=True, cali=True),
)
VARIANTS_BY_NAME = {v.name: v for v in VARIANTS}


def variant_config(cfg: RunConfig, variant: Variant, seed: int) -> RunConfig:
    if variant.semantic_length is None:
        stack = replace(cfg.stack, use_semantic=False, refine=False, calibrate=False)
        encoder = replace(cfg.encoder, seed=seed)
    else:
        stack = replace(cfg.stack, use_semantic=True, refine=variant.seq, calibrate=variant.cali)
        encoder = replace(cfg.encoder, semantic_dim=variant.semantic_length, seed=seed)
    train = replace(cfg.train, seed=seed)
    return replace(cfg, encoder=encoder, stack=stack, train=train)


def run_variant(cfg: RunConfig, variant: Variant, seed: int, train_scenes, eval_scenes, n_refs: int) -> dict:
    vcfg = variant_config(cfg, variant, seed)
    state = new_state(vcfg.encoder, vcfg.stack, vcfg.train)
    trainer = Trainer(state, train_scenes)
    t0 = time.time()
    losses = trainer.train(vcfg.train.iterations)
    metrics = evaluate_scenes(state.model, eval_scenes, n_refs, cfg.eval.batch_size, cfg.eval.views_per_scene)
    return {
        "seed": seed,
        "psnr": metrics["psnr"],
        "ssim": metrics["ssim"],
        "final_loss": losses[-1].total if losses else None,
        "seconds": round(time.time() - t0, 2),
    }


def run_ablation(cfg: RunConfig, variants=None, seeds=None, log=print) -> dict:
    """Train every variant under identical budget and seeds; return the result table.

    The table is JSON-ready: ``{"metadata": ..., "rows": [{"variant", "semantic_length",
    "seq", "cali", "psnr", "ssim", "per_seed"}]}`` with rows in grid order.
    """
    names = variants or cfg.ablation.variants or [v.name for v in VARIANTS]
    unknown = [n for n in names if n not in VARIANTS_BY_NAME]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS_BY_NAME)}")
    chosen = [v for v in VARIANTS if v.name in names]
    seeds = list(seeds if seeds is not None else cfg.ablation.seeds)
    n_refs = cfg.ablation.n_refs
    train_scenes = make_scenes(cfg.data, "train")
    eval_scenes = make_scenes(cfg.data, "eval")
    rows = []
    for v in chosen:
        runs = []
        for s in seeds:
            r = run_variant(cfg, v, s, train_scenes, eval_scenes, n_refs)
            runs.append(r)
            if log:
                log(f"{v.name:16s} seed {s}: psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} ({r['seconds']} s)")
        rows.append(
            {
                "variant": v.name,
                "semantic_length": v.semantic_length,
                "seq": v.seq,
                "cali": v.cali,
                "psnr": float(np.mean([r["psnr"] for r in runs])),
                "ssim": float(np.mean([r["ssim"] for r in runs])),
                "per_seed": runs,
            }
        )
    return {
        "metadata": {
            "seeds": seeds,
            "iterations": cfg.train.iterations,
            "rays_per_iteration": cfg.train.rays_per_iteration,
            "n_refs": n_refs,
            "train_scenes": len(train_scenes),
            "eval_scenes": len(eval_scenes),
            "image_size": [cfg.data.width, cfg.data.height],
            "config": cfg.to_dict(),
        },
        "rows": rows,
    }
