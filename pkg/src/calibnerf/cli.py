"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``render``, ``eval``, ``ablate``,
``gradcheck``.  Any config field can be overridden with a dotted flag, e.g.
``--train.lr_encoder 0.001`` or ``--data.scene.sphere_count 0``.

Exit codes: 0 success, 1 usage/config/input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .scene import SceneFormatError, load_scene, save_scene, write_ppm
from .transformer import NumericError

LOSS_FIELDS = ["iteration", "mse", "central", "perceptual", "total", "lr_encoder", "lr_rest"]


class UsageError(Exception):
    pass


def _overrides(extra):
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 2
        pairs.append((key, val))
    return pairs


def _config(args, extra, seed_key=None) -> RunConfig:
    overrides = _overrides(extra)
    if seed_key and args.seed is not None:
        overrides.append((seed_key, str(args.seed)))
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def find_scenes(path, split: str = "train") -> list:
    """Scene directories under ``path``: itself, its ``split`` subdirectory, or its children."""
    path = Path(path)
    if (path / "scene.json").exists():
        return [path]
    if (path / split).is_dir():
        path = path / split
    dirs = sorted(p for p in path.iterdir() if (p / "scene.json").exists()) if path.is_dir() else []
    if not dirs:
        raise UsageError(f"no scenes found under {path}")
    return dirs


def cmd_gen_data(args, extra) -> int:
    from .evaluate import make_scenes

    cfg = _config(args, extra, "data.seed")
    out = _out_dir(args)
    cfg.save(out / "config.json")
    listing = []
    for split in ("train", "eval"):
        for scene in make_scenes(cfg.data, split):
            d = out / split / scene.name
            save_scene(scene, d)
            listing.append({"split": split, "name": scene.name, "path": str(d.relative_to(out)), "views": len(scene)})
            print(f"{split}\t{scene.name}\t{len(scene)} views\t{d}")
    (out / "manifest.json").write_text(json.dumps(listing, indent=1))
    return 0


def _write_loss_rows(path, rows, header=False):
    with open(path, "w" if header else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, extrasaction="ignore")
        if header:
            w.writeheader()
        w.writerows(rows)


def cmd_train(args, extra) -> int:
    from .plotting import plot_loss_curve
    from .train import Trainer, new_state

    scenes = [load_scene(d) for d in find_scenes(args.data)]
    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), _overrides(extra)))
        state.config = cfg.train
    else:
        cfg = _config(args, extra, "train.seed")
        state = new_state(cfg.encoder, cfg.stack, cfg.train)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    out = _out_dir(args)
    cfg.save(out / "config.json")
    trainer = Trainer(state, scenes)
    sections = cfg.sections()
    latest = out / "checkpoint.bin"
    log_path = out / "loss_log.csv"
    if not args.resume:
        save_checkpoint(latest, state, sections)
    if not args.resume or not log_path.exists():
        _write_loss_rows(log_path, [], header=True)
    target = cfg.train.iterations
    pending = []
    t0 = time.time()
    try:
        while state.iteration < target:
            bd = trainer.train_step()
            pending.append(state.history[-1])
            if state.iteration % cfg.train.log_every == 0 or state.iteration == target:
                _write_loss_rows(log_path, pending)
                pending = []
                print(f"iter {state.iteration:6d}  total {bd.total:.5f}  mse {bd.mse:.5f}  "
                      f"central {bd.central:.4f}  perc {bd.perceptual:.4f}  ({time.time() - t0:.0f} s)", flush=True)
            if state.iteration % cfg.train.checkpoint_every == 0 or state.iteration == target:
                save_checkpoint(out / f"ckpt_{state.iteration:06d}.bin", state, sections)
                save_checkpoint(latest, state, sections)
    except NumericError as exc:
        print(f"numeric failure: {exc}\nlast good checkpoint: {latest}", file=sys.stderr)
        return 2
    if pending:
        _write_loss_rows(log_path, pending)
    if log_path.exists():
        with open(log_path) as fh:
            hist = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        if hist:
            for h in hist:
                h["lambda_perceptual"] = cfg.train.lambda_perceptual
            plot_loss_curve(hist, out / "loss_curve.png")
    print(f"checkpoint: {latest}")
    return 0


def cmd_render(args, extra) -> int:
    from .evaluate import evaluate_view
    from .plotting import plot_comparison

    state, cfg = load_checkpoint(args.checkpoint)
    scene = load_scene(find_scenes(args.scene, split="eval")[0])
    if cfg.data.width != scene.width or cfg.data.height != scene.height:
        print(f"note: scene is {scene.width}x{scene.height}, trained on {cfg.data.width}x{cfg.data.height}")
    out = _out_dir(args)
    views = args.views if args.views else list(range(len(scene)))
    for v in views:
        if not 0 <= v < len(scene):
            raise UsageError(f"view {v} out of range for scene with {len(scene)} views")
        t0 = time.time()
        img, p, s, refs = evaluate_view(state.model, scene, v, args.n_refs, cfg.eval.batch_size,
                                        exclude_target=not args.include_target)
        dt = time.time() - t0
        write_ppm(out / f"render_{v:03d}.ppm", img)
        plot_comparison(img, scene.images[v], out / f"render_{v:03d}.png", f"view {v}, refs {refs}: {p:.2f} dB")
        print(f"view {v}\trefs {refs}\tpsnr {p:.3f}\tssim {s:.4f}\t{dt:.2f} s")
    return 0


def cmd_eval(args, extra) -> int:
    from .evaluate import evaluate_view
    from .plotting import plot_comparison, plot_metrics_by_views

    state, cfg = load_checkpoint(args.checkpoint)
    scene_dirs = find_scenes(args.scenes, split="eval")
    scenes = [load_scene(d) for d in scene_dirs]
    out = _out_dir(args)
    n_list = args.n_refs or cfg.eval.n_refs
    results = []
    for n in n_list:
        per_view = []
        for scene in scenes:
            nv = len(scene) if cfg.eval.views_per_scene <= 0 else min(cfg.eval.views_per_scene, len(scene))
            for t in range(nv):
                if len(scene) - 1 < n:
                    raise UsageError(f"scene {scene.name} has too few views for {n} references")
                img, p, s, refs = evaluate_view(state.model, scene, t, n, cfg.eval.batch_size)
                per_view.append({"scene": scene.name, "view": t, "refs": refs, "psnr": p, "ssim": s})
                if t == 0:
                    plot_comparison(img, scene.images[t], out / f"{scene.name}_n{n}.png",
                                    f"{scene.name} view {t}, {n} ref(s): {p:.2f} dB")
        results.append({
            "n_refs": n,
            "psnr": float(np.mean([r["psnr"] for r in per_view])),
            "ssim": float(np.mean([r["ssim"] for r in per_view])),
            "views": per_view,
        })
        print(f"n_refs {n}\tpsnr {results[-1]['psnr']:.3f}\tssim {results[-1]['ssim']:.4f}\t({len(per_view)} views)")
    metrics = {"checkpoint": str(args.checkpoint), "scenes": [s.name for s in scenes], "results": results}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    plot_metrics_by_views(metrics, out / "metrics.png")
    return 0


def cmd_ablate(args, extra) -> int:
    from .ablation import run_ablation
    from .plotting import plot_ablation

    cfg = _config(args, extra)
    if args.seed is not None:
        cfg.ablation.seeds = [args.seed]
    out = _out_dir(args)
    cfg.save(out / "config.json")
    table = run_ablation(cfg, variants=args.variants)
    (out / "ablation.json").write_text(json.dumps(table, indent=1))
    plot_ablation(table, out / "ablation.png")
    for r in table["rows"]:
        print(f"{r['variant']:16s}\tpsnr {r['psnr']:.3f}\tssim {r['ssim']:.4f}")
    return 0


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import run_suite

    scopes = None if args.scope in (None, ["all"]) else args.scope
    reports = run_suite(scopes)
    for r in reports:
        for line in r.lines():
            print(line)
    return 0 if all(r.passed for r in reports) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calibnerf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON config file or bundled preset name (benchmark, overfit, smoke)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)

    sp = sub.add_parser("gen-data", help="write procedural train/eval scenes")
    common(sp, "data")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on scenes")
    common(sp, "run")
    sp.add_argument("--data", required=True, help="gen-data output or scene directory")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render views of a scene from a checkpoint")
    common(sp, "renders")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--views", type=int, nargs="*")
    sp.add_argument("--n-refs", type=int, default=1)
    sp.add_argument("--include-target", action="store_true", help="allow the target itself as a reference")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM per reference-view count")
    common(sp, "eval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--n-refs", type=int, nargs="*")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and score the ablation grid")
    common(sp, "ablation")
    sp.add_argument("--variants", nargs="*")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp, None)
    sp.add_argument("--scope", nargs="*", help="subset of checks (default: all)")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, SceneFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
