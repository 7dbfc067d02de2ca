"""Acceptance criteria, one test (and one PASS/FAIL summary line) per criterion.

The training experiments (overfit, ablation) dominate the runtime; they are
marked ``slow`` and can be skipped with ``-m "not slow"``.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from calibnerf.checkpoint import load_checkpoint, save_checkpoint
from calibnerf.cli import main as cli_main
from calibnerf.ablation import VARIANTS, run_ablation
from calibnerf.config import load_config
from calibnerf.evaluate import heldout_psnr, make_scenes
from calibnerf.geometry import Camera, Intrinsics, Pose, generate_rays, project, random_rotation
from calibnerf.gradcheck import run_suite
from calibnerf.metrics import psnr, ssim
from calibnerf.semantic import aggregate, calibrate, central_loss, flatten, unflatten
from calibnerf.train import Trainer, new_state
from test_scene import TRACE_CASES, one_ray

OVERFIT_TARGET_DB = 30.0
OVERFIT_MAX_ITERATIONS = 5000
OVERFIT_CHECK_EVERY = 250

# Reduced ablation budget (see README): the full 8 x 3 grid at the nominal
# 5,000 iterations does not fit a single-CPU test run.
ABLATION_ITERATIONS = 300
ABLATION_RAYS = 256


def record(log, number, name, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
    return ok


def test_1_algebra_suite(acceptance_log):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = {k: 0.0 for k in ("identity", "composition", "inverse", "norm", "flatten", "permutation", "central")}
    central_ok = True
    for _ in range(100):
        c = 3 * int(rng.integers(1, 40))
        s = torch.as_tensor(rng.normal(size=c))
        a, b = random_rotation(rng), random_rotation(rng)
        ca = calibrate(s, a)
        worst["identity"] = max(worst["identity"], float((calibrate(s, np.eye(3)) - s).abs().max()))
        worst["composition"] = max(worst["composition"], float((calibrate(ca, b) - calibrate(s, b @ a)).abs().max()))
        worst["inverse"] = max(worst["inverse"], float((calibrate(ca, a.T) - s).abs().max()))
        worst["norm"] = max(worst["norm"], abs(float(ca.norm() - s.norm())))
        worst["flatten"] = max(worst["flatten"], float((flatten(unflatten(s)) - s).abs().max()))
        n = int(rng.integers(1, 8))
        views = torch.as_tensor(rng.normal(size=(n, c)))
        perm = torch.as_tensor(rng.permutation(n))
        worst["permutation"] = max(worst["permutation"], float((aggregate(views[perm]) - aggregate(views)).abs().max()))
        same = views[:1].expand(n, c)
        worst["central"] = max(worst["central"], float(central_loss(same)))
        if n > 1 and not float(central_loss(views)) > 0:
            central_ok = False
    elapsed = time.time() - t0
    ok = max(worst.values()) <= 1e-6 and central_ok and elapsed < 30
    record(acceptance_log, 1, "algebra suite", ok,
           f"100 trials per property, worst error {max(worst.values()):.2e} (tol 1e-6), {elapsed:.1f} s (limit 30 s)")
    assert ok, worst


def test_2_gradient_suite(acceptance_log):
    t0 = time.time()
    reports = run_suite()
    elapsed = time.time() - t0
    worst = max(r.max_error for r in reports)
    ok = all(r.passed for r in reports) and worst < 1e-4 and elapsed < 300
    names = ", ".join(r.name for r in reports)
    record(acceptance_log, 2, "gradient suite", ok,
           f"{names}: max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f} s (limit 300 s)")
    assert ok, "\n".join(line for r in reports for line in r.lines())


def test_3_oracle_suite(acceptance_log):
    trace_err = 0.0
    for scene, o, d, expected in TRACE_CASES.values():
        trace_err = max(trace_err, float(np.abs(one_ray(scene, o, d) - expected).max()))
    rng = np.random.default_rng(7)
    px_err = 0.0
    for _ in range(1000):
        w, h = int(rng.integers(8, 128)), int(rng.integers(8, 128))
        cam = Camera(Pose(random_rotation(rng), rng.normal(size=3)),
                     Intrinsics(rng.uniform(10, 200), rng.uniform(10, 200), rng.uniform(0, w - 1),
                                rng.uniform(0, h - 1)), w, h)
        pix = rng.uniform([0, 0], [w - 1, h - 1], size=(1, 2))
        rays = generate_rays(cam, pix, 0.1, 50.0)
        u, v, _, valid = project(rays.origins + rng.uniform(0.1, 50.0) * rays.directions, cam)
        assert valid[0]
        px_err = max(px_err, abs(u[0] - pix[0, 0]), abs(v[0] - pix[0, 1]))
    ok = len(TRACE_CASES) >= 10 and trace_err <= 1e-9 and px_err < 1e-4
    record(acceptance_log, 3, "oracle suite", ok,
           f"{len(TRACE_CASES)} tracer cases max err {trace_err:.1e} (tol 1e-9); "
           f"roundtrip max {px_err:.1e} px over 1000 draws (tol 1e-4)")
    assert ok


@pytest.fixture(scope="module")
def overfit_run():
    cfg = load_config("overfit")
    scenes = make_scenes(cfg.data, "train")
    state = new_state(cfg.encoder, cfg.stack, cfg.train)
    trainer = Trainer(state, scenes)
    trace = []
    t0 = time.time()
    limit = min(cfg.train.iterations, OVERFIT_MAX_ITERATIONS)
    while state.iteration < limit:
        trainer.train(min(OVERFIT_CHECK_EVERY, limit - state.iteration))
        p = heldout_psnr(state.model, scenes[0], trainer.masks[0], cfg.train.ref_views_max - 1,
                         cfg.train.exclude_target)
        trace.append((state.iteration, p))
        if p >= OVERFIT_TARGET_DB:
            break
    return {"cfg": cfg, "trace": trace, "history": list(state.history), "seconds": time.time() - t0}


@pytest.mark.slow
def test_4_overfit(acceptance_log, overfit_run):
    it, best = overfit_run["trace"][-1]
    cfg = overfit_run["cfg"]
    hours = overfit_run["seconds"] / 3600
    ok = best >= OVERFIT_TARGET_DB and it <= OVERFIT_MAX_ITERATIONS and hours <= 4
    record(acceptance_log, 4, "overfit experiment", ok,
           f"held-out-ray PSNR {best:.2f} dB at iteration {it} (need >= 30 dB within 5000; "
           f"{cfg.data.scene.camera_count} views {cfg.data.width}x{cfg.data.height}, K={cfg.stack.stages}, "
           f"M={cfg.stack.points_per_ray}, exclude_target={cfg.train.exclude_target}), {hours * 60:.1f} min")
    assert ok, overfit_run["trace"]


@pytest.mark.slow
def test_5_loss_contract(acceptance_log, overfit_run):
    hist = overfit_run["history"]
    worst = max(abs(h["total"] - (h["mse"] + 1.0 * h["central"] + 0.001 * h["perceptual"])) for h in hist)
    finite = all(np.isfinite([h["total"], h["mse"], h["central"], h["perceptual"]]).all() for h in hist)
    weights = all(h["lambda_central"] == 1.0 and h["lambda_perceptual"] == 0.001 for h in hist)
    ok = worst <= 1e-6 and finite and weights
    record(acceptance_log, 5, "loss contract", ok,
           f"{len(hist)} logged steps, max |total - parts| {worst:.1e} (tol 1e-6), all finite: {finite}")
    assert ok


@pytest.mark.slow
def test_6_ablation_directionality(acceptance_log, tmp_path_factory):
    cfg = load_config("benchmark")
    cfg = replace(cfg, train=replace(cfg.train, iterations=ABLATION_ITERATIONS, rays_per_iteration=ABLATION_RAYS))
    table = run_ablation(cfg, log=None)
    out = tmp_path_factory.mktemp("ablation") / "ablation.json"
    out.write_text(json.dumps(table, indent=1))
    rows = {r["variant"]: r for r in table["rows"]}
    grid_ok = [r["variant"] for r in table["rows"]] == [v.name for v in VARIANTS]
    seeds_ok = table["metadata"]["seeds"] == [0, 1, 2] and table["metadata"]["n_refs"] == 1
    full, base = rows["+96 Seq. Cali."]["psnr"], rows["baseline"]["psnr"]
    ok = grid_ok and seeds_ok and table["metadata"]["train_scenes"] == 8 and full >= base
    summary = ", ".join(f"{name} {r['psnr']:.2f}" for name, r in rows.items())
    record(acceptance_log, 6, "ablation directionality", ok,
           f"full {full:.3f} dB vs baseline {base:.3f} dB (gap {full - base:+.3f}) over seeds 0-2, 1 ref, "
           f"{ABLATION_ITERATIONS} iterations x {ABLATION_RAYS} rays; grid [{summary}]")
    assert grid_ok and seeds_ok
    assert full >= base, summary


def test_7_metric_fixtures(acceptance_log, smoke_cfg, smoke_scenes, tmp_path):
    x = np.random.default_rng(0).uniform(0, 0.9, size=(16, 16, 3))
    p = psnr(x, x + 0.1)
    s = ssim(x, x)
    cfg = replace(smoke_cfg, train=replace(smoke_cfg.train, precision="double"))
    straight = Trainer(new_state(cfg.encoder, cfg.stack, cfg.train), smoke_scenes)
    ref = [b.as_dict() for b in straight.train(4)]
    first = Trainer(new_state(cfg.encoder, cfg.stack, cfg.train), smoke_scenes)
    head = [b.as_dict() for b in first.train(2)]
    save_checkpoint(tmp_path / "c.bin", first.state, cfg.sections())
    state, _ = load_checkpoint(tmp_path / "c.bin")
    tail = [b.as_dict() for b in Trainer(state, smoke_scenes).train(2)]
    params_equal = all(torch.equal(a, b) for a, b in zip(straight.state.model.state_dict().values(),
                                                         state.model.state_dict().values()))
    resume_ok = head + tail == ref and params_equal
    ok = abs(p - 20.0) <= 1e-9 and abs(s - 1.0) <= 1e-12 and resume_ok
    record(acceptance_log, 7, "metric fixtures", ok,
           f"psnr(x, x+0.1) = {p:.12f} dB, ssim(x, x) = {s:.12f}, double-precision resume bit-exact: {resume_ok}")
    assert ok


@pytest.mark.slow
def test_8_view_count_sweep(acceptance_log, tmp_path):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    codes = [
        cli_main(["gen-data", "--config", "benchmark", "--out", str(data)]),
        cli_main(["train", "--config", "benchmark", "--data", str(data), "--iterations", "0", "--out", str(run)]),
        cli_main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--scenes", str(data),
                  "--n-refs", "1", "2", "3", "--out", str(ev)]),
    ]
    metrics = json.loads((ev / "metrics.json").read_text()) if (ev / "metrics.json").exists() else {"results": []}
    got = [r["n_refs"] for r in metrics["results"]]
    finite = all(np.isfinite(r["psnr"]) and np.isfinite(r["ssim"]) for r in metrics["results"])
    ok = codes == [0, 0, 0] and got == [1, 2, 3] and finite
    record(acceptance_log, 8, "view-count sweep", ok,
           f"exit codes {codes}, metrics.json n_refs {got}, "
           + ", ".join(f"n={r['n_refs']}: {r['psnr']:.2f} dB" for r in metrics["results"]))
    assert ok
