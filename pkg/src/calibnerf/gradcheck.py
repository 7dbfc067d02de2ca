"""Finite-difference gradient checking and the standard suite of checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

FD_STEP = 1e-5
# Denominator floor: gradients that vanish identically (e.g. a key bias under
# softmax shift invariance) are compared in absolute terms instead of against noise.
SCALE_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    errors: dict = field(default_factory=dict)  # group -> max relative error
    failures: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e < self.tolerance for e in self.errors.values())

    def lines(self):
        yield f"{'PASS' if self.passed else 'FAIL'} {self.name}: max rel err {self.max_error:.3e} (tol {self.tolerance:g})"
        for g, e in self.errors.items():
            yield f"    {g}: {e:.3e}"
        for f in self.failures:
            yield f"    failure: {f}"


def gradcheck(fn, inputs: dict, tolerance: float = 1e-4, step: float = FD_STEP, name: str = "op",
              projection_seed: int = 0, groups: dict | None = None) -> GradcheckReport:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``inputs`` maps names to double-precision leaf tensors that ``fn`` reads
    (closing over them).  A non-scalar output is reduced with a fixed random
    projection.  ``groups`` optionally maps group names to lists of input
    names; the error of a group is
    ``max|analytic - numeric| / max(|numeric|, |analytic|, SCALE_FLOOR)`` over its entries.
    """
    report = GradcheckReport(name, tolerance)
    tensors = dict(inputs)
    for k, t in tensors.items():
        if t.dtype != torch.float64:
            raise TypeError(f"{k}: gradcheck needs float64 tensors, got {t.dtype}")
        t.requires_grad_(True)

    out = fn()
    gen = torch.Generator().manual_seed(projection_seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn() * proj).sum()

    for t in tensors.values():
        t.grad = None
    scalar().backward()
    analytic = {k: (t.grad.clone() if t.grad is not None else torch.zeros_like(t)) for k, t in tensors.items()}

    numeric = {}
    with torch.no_grad():
        for k, t in tensors.items():
            flat = t.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = scalar().item()
                flat[i] = orig - step
                fm = scalar().item()
                flat[i] = orig
                g[i] = (fp - fm) / (2 * step)
            numeric[k] = g.view_as(t)

    groups = groups or {k: [k] for k in tensors}
    for gname, members in groups.items():
        a = torch.cat([analytic[m].reshape(-1) for m in members])
        n = torch.cat([numeric[m].reshape(-1) for m in members])
        if not (torch.isfinite(a).all() and torch.isfinite(n).all()):
            report.failures.append(f"{gname}: non-finite gradient")
            report.errors[gname] = float("inf")
            continue
        scale = max(float(n.abs().max()), float(a.abs().max()), SCALE_FLOOR)
        report.errors[gname] = float((a - n).abs().max()) / scale
    return report


def module_inputs(module: torch.nn.Module, prefix: str = "") -> dict:
    return {f"{prefix}{k}": p for k, p in module.named_parameters()}


def group_by_module(names, depth: int = 1) -> dict:
    """Group parameter names by their first ``depth`` dotted components."""
    out = {}
    for n in names:
        key = ".".join(n.split(".")[:depth])
        out.setdefault(key, []).append(n)
    return out


# ---------------------------------------------------------------------------
# standard suite


def _rng_tensor(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def check_calibrate(tol=1e-6):
    from .geometry import random_rotation
    from .semantic import calibrate

    gen = torch.Generator().manual_seed(1)
    s = _rng_tensor(gen, 12)
    rot = torch.as_tensor(random_rotation(np.random.default_rng(1)))
    return gradcheck(lambda: calibrate(s, rot), {"s": s}, tol, name="calibrate")


def check_refine_step(tol=1e-4):
    from .semantic import RefinementState, SemanticRefiner, refine_step

    torch.manual_seed(2)
    ref = SemanticRefiner(12, stages=2, heads=2).double()
    gen = torch.Generator().manual_seed(2)
    cur, orig = _rng_tensor(gen, 12), _rng_tensor(gen, 3, 12)
    inputs = module_inputs(ref) | {"current": cur, "originals": orig}
    return gradcheck(lambda: refine_step(RefinementState(0, cur, orig, ref)).current, inputs, tol,
                     name="refine_step")


def check_augment(tol=1e-4):
    from .transformer import SemanticAugment

    torch.manual_seed(3)
    aug = SemanticAugment(4, 6).double()
    gen = torch.Generator().manual_seed(3)
    tok, sem = _rng_tensor(gen, 5, 4), _rng_tensor(gen, 6)
    inputs = module_inputs(aug) | {"token": tok, "semantic": sem}
    return gradcheck(lambda: aug(tok, sem), inputs, tol, name="augment_with_semantic")


def check_view_transformer(tol=1e-4):
    from .transformer import ViewTransformer

    torch.manual_seed(4)
    vt = ViewTransformer(4, 2).double()
    gen = torch.Generator().manual_seed(4)
    views, query = _rng_tensor(gen, 3, 5, 4), _rng_tensor(gen, 3, 4)
    mask = torch.tensor([[True] * 5, [True, False, True, False, True], [False, True, False, False, False]])
    inputs = module_inputs(vt) | {"views": views, "query": query}
    return gradcheck(lambda: vt(views, mask, query)[0], inputs, tol, name="view_transform")


def check_ray_transformer(tol=1e-4):
    from .transformer import RayTransformer, depth_position_encoding

    torch.manual_seed(5)
    rt = RayTransformer(4, 2, 8).double()
    gen = torch.Generator().manual_seed(5)
    x = _rng_tensor(gen, 2, 6, 4)
    pe = depth_position_encoding(6, 4, torch.float64)
    inputs = module_inputs(rt) | {"tokens": x}
    return gradcheck(lambda: rt(x, pe), inputs, tol, name="ray_transform")


def check_perceptual(tol=1e-4):
    from .losses import FeaturePyramid, perceptual_loss

    net = FeaturePyramid(channels=(4, 4, 4)).double()
    rng = np.random.default_rng(6)
    truth = rng.uniform(size=(8, 8, 3))
    pos = np.array([[0, 0], [3, 4], [7, 7], [5, 1]])
    pred = torch.as_tensor(rng.uniform(size=(4, 3)))
    return gradcheck(lambda: perceptual_loss(pred, pos, truth, net), {"pred": pred}, tol, name="perceptual_loss")


def tiny_pipeline(seed: int = 0, stages: int = 1, n_views: int = 1, points: int = 1):
    """A tiny double-precision model, scene and ray batch for end-to-end checks."""
    from .encoder import EncoderConfig
    from .scene import SyntheticSceneSpec, generate_synthetic_scene
    from .transformer import CaesarModel, StackConfig

    spec = SyntheticSceneSpec(seed=seed, sphere_count=2, camera_count=n_views + 1, elevation_range=(30, 35))
    scene, _ = generate_synthetic_scene(spec, 8, 8)
    enc = EncoderConfig(pixel_feature_dim=4, semantic_dim=6, downsample_stages=2, base_channels=2, seed=seed)
    stack = StackConfig(stages=stages, heads=2, points_per_ray=points, ffn_width=8, encoding_freqs=2)
    model = CaesarModel(enc, stack, seed=seed).double()
    return model, scene


def check_pipeline(tol=1e-4, stages=1, n_views=1, points=1):
    from .geometry import generate_rays, sample_depths

    model, scene = tiny_pipeline(stages=stages, n_views=n_views, points=points)
    target = scene.cameras[0]
    rays = generate_rays(target, np.array([[3.0, 4.0], [4.5, 3.5]]), scene.near, scene.far)
    depths = sample_depths(scene.near, scene.far, points, "midpoint", n_rays=2)
    images = np.stack(scene.images[1 : 1 + n_views])
    cams = scene.cameras[1 : 1 + n_views]

    def fn():
        refs = model.prepare(images, cams, target.pose, scene.near, scene.far)
        return model(refs, rays.origins, rays.directions, depths)

    params = module_inputs(model)
    return gradcheck(fn, params, tol, name=f"pipeline K={stages} M={points} N={n_views}",
                     groups=group_by_module(params, depth=2))


SUITE = {
    "calibrate": check_calibrate,
    "refine_step": check_refine_step,
    "augment": check_augment,
    "view_transformer": check_view_transformer,
    "ray_transformer": check_ray_transformer,
    "perceptual": check_perceptual,
    "pipeline": check_pipeline,
}


def run_suite(names=None) -> list:
    names = names or list(SUITE)
    unknown = set(names) - set(SUITE)
    if unknown:
        raise ValueError(f"unknown gradcheck scopes {sorted(unknown)}; choose from {sorted(SUITE)}")
    return [SUITE[n]() for n in names]
