"""Synthetic scenes, the analytic ray tracer and the on-disk scene format.

A scene directory holds ``scene.json`` plus one binary P6 PPM per view::

    {"name": ..., "near": ..., "far": ...,
     "views": [{"image": "view_000.ppm", "width": W, "height": H,
                "fx": ..., "fy": ..., "cx": ..., "cy": ...,
                "rotation": [9 reals, row-major world-to-camera],
                "translation": [3 reals]}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, Intrinsics, InvalidPoseError, Pose, generate_rays

HIT_EPS = 1e-9


class SceneFormatError(ValueError):
    """Malformed scene directory; the message names the offending field."""


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class SceneBundle:
    images: list
    cameras: list
    near: float
    far: float
    name: str = "scene"

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("scene needs at least one image")
        if len(self.images) != len(self.cameras):
            raise ValueError(f"{len(self.images)} images but {len(self.cameras)} cameras")
        shape = self.images[0].shape
        for i, (img, cam) in enumerate(zip(self.images, self.cameras)):
            if img.shape != shape or img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"view {i}: image shape {img.shape} inconsistent")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    def __len__(self):
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images[0].shape[0]

    @property
    def width(self) -> int:
        return self.images[0].shape[1]


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    sphere_count: int = 3
    placement_extent: float = 0.6
    radius_range: tuple = (0.2, 0.45)
    albedo_range: tuple = (0.2, 1.0)
    ground_plane: bool = True
    ground_extent: float = 1.5
    ground_albedo: tuple = (0.55, 0.55, 0.5)
    background_color: tuple = (0.08, 0.1, 0.15)
    light_direction: tuple = (0.36, 0.48, 0.8)
    rig_radius: float = 4.0
    elevation_range: tuple = (20.0, 50.0)
    camera_count: int = 6
    focal_scale: float = 1.2

    def __post_init__(self):
        if self.sphere_count < 0:
            raise ValueError("sphere_count must be >= 0")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError(f"invalid radius_range {self.radius_range}")
        for name in ("albedo_range", "ground_albedo", "background_color"):
            vals = np.asarray(getattr(self, name), dtype=float)
            if np.any(vals < 0) or np.any(vals > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        l = np.asarray(self.light_direction, dtype=float)
        if np.linalg.norm(l) == 0:
            raise ValueError("light_direction must be non-zero")


@dataclass
class AnalyticScene:
    """Geometry consumed by :func:`trace`."""

    spheres: list = field(default_factory=list)
    ground_plane: bool = False
    ground_extent: float = 1.5
    ground_albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    light: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.light = np.asarray(self.light, dtype=np.float64)
        self.light = self.light / np.linalg.norm(self.light)
        self.ground_albedo = np.asarray(self.ground_albedo, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)

    def bounding_radius(self) -> float:
        r = 0.0
        for s in self.spheres:
            r = max(r, np.linalg.norm(s.center) + s.radius)
        if self.ground_plane:
            r = max(r, np.sqrt(2) * self.ground_extent)
        return max(r, 1e-3)


def intersect_sphere(origins, directions, center, radius):
    """Nearest positive hit distance of unit-direction rays, ``inf`` on a miss."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, directions)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t = np.full(len(origins), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(hit & (t0 > HIT_EPS), t0, t)
    t = np.where(hit & (t0 <= HIT_EPS) & (t1 > HIT_EPS), t1, t)
    return t


def intersect_ground(origins, directions, extent):
    """Hit distance with the square ``z = 0, |x|, |y| <= extent``."""
    dz = directions[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dz
    p = origins + t[:, None] * directions
    ok = (np.abs(dz) > 1e-12) & (t > HIT_EPS) & (np.abs(p[:, 0]) <= extent) & (np.abs(p[:, 1]) <= extent)
    return np.where(ok, t, np.inf)


def trace(scene: AnalyticScene, origins, directions) -> np.ndarray:
    """Shade rays: nearest hit, Lambertian ``albedo * max(0, n . l)``, else background.

    Normals face the incoming ray.  No shadows or interreflection.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = len(origins)
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    for s in scene.spheres:
        t = intersect_sphere(origins, directions, s.center, s.radius)
        closer = t < best
        best = np.where(closer, t, best)
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * directions
        nrm = (p - s.center) / s.radius
        normal = np.where(closer[:, None], nrm, normal)
        albedo = np.where(closer[:, None], s.albedo, albedo)
    if scene.ground_plane:
        t = intersect_ground(origins, directions, scene.ground_extent)
        closer = t < best
        best = np.where(closer, t, best)
        normal = np.where(closer[:, None], np.array([0.0, 0.0, 1.0]), normal)
        albedo = np.where(closer[:, None], scene.ground_albedo, albedo)
    hit = np.isfinite(best)
    facing = np.einsum("ij,ij->i", normal, directions) > 0
    normal = np.where(facing[:, None], -normal, normal)
    shade = np.maximum(0.0, (normal * scene.light).sum(-1))
    return np.where(hit[:, None], albedo * shade[:, None], scene.background)


def quantize(image) -> np.ndarray:
    """Round to the 8-bit grid used on disk, values ``k / 255``."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def render_view(scene: AnalyticScene, camera: Camera) -> np.ndarray:
    """Ground-truth image of ``camera``, quantized to 8 bits."""
    rays = generate_rays(camera, camera.pixel_grid())
    rgb = trace(scene, rays.origins, rays.directions)
    return quantize(rgb.reshape(camera.height, camera.width, 3))


def build_analytic_scene(spec: SyntheticSceneSpec) -> AnalyticScene:
    rng = np.random.default_rng(spec.seed)
    spheres = []
    for _ in range(spec.sphere_count):
        r = rng.uniform(*spec.radius_range)
        xy = rng.uniform(-spec.placement_extent, spec.placement_extent, size=2)
        z = r if spec.ground_plane else rng.uniform(-spec.placement_extent, spec.placement_extent)
        albedo = rng.uniform(*spec.albedo_range, size=3)
        spheres.append(Sphere(np.array([xy[0], xy[1], z]), float(r), albedo))
    return AnalyticScene(
        spheres=spheres,
        ground_plane=spec.ground_plane,
        ground_extent=spec.ground_extent,
        ground_albedo=np.asarray(spec.ground_albedo, dtype=np.float64),
        background=np.asarray(spec.background_color, dtype=np.float64),
        light=np.asarray(spec.light_direction, dtype=np.float64),
    )


def rig_cameras(spec: SyntheticSceneSpec, width: int, height: int, centroid) -> list:
    """Cameras on a hemisphere, evenly spaced in azimuth, all looking at ``centroid``."""
    if spec.camera_count < 1:
        raise ValueError("camera rig must have at least one camera")
    rng = np.random.default_rng([spec.seed, 1])
    az0 = rng.uniform(0, 2 * np.pi)
    lo, hi = np.radians(spec.elevation_range)
    f = spec.focal_scale * max(width, height)
    intr = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2)
    cams = []
    for i in range(spec.camera_count):
        az = az0 + 2 * np.pi * i / spec.camera_count
        el = rng.uniform(lo, hi)
        eye = centroid + spec.rig_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(Pose.look_at(eye, centroid), intr, width, height))
    return cams


def generate_synthetic_scene(spec: SyntheticSceneSpec, width: int, height: int, name: str | None = None):
    """Render a procedural scene from every rig camera.

    Returns ``(bundle, analytic_scene)``; the latter is the oracle that
    reproduces every stored image through :func:`render_view`.
    """
    scene = build_analytic_scene(spec)
    if scene.spheres:
        centroid = np.mean([s.center for s in scene.spheres], axis=0)
    else:
        centroid = np.zeros(3)
    cams = rig_cameras(spec, width, height, centroid)
    images = [render_view(scene, c) for c in cams]
    reach = scene.bounding_radius() + np.linalg.norm(centroid)
    dists = [np.linalg.norm(c.pose.center) for c in cams]
    near = max(0.05, min(dists) - reach)
    far = max(dists) + reach
    bundle = SceneBundle(images, cams, float(near), float(far), name or f"synthetic_{spec.seed}")
    return bundle, scene


# ---------------------------------------------------------------------------
# disk format


def write_ppm(path, image) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6":
        raise SceneFormatError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise SceneFormatError(f"{path}: max value must be 255, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_scene(scene: SceneBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, (img, cam) in enumerate(zip(scene.images, scene.cameras)):
        fname = f"view_{i:03d}.ppm"
        write_ppm(directory / fname, img)
        k = cam.intrinsics
        views.append(
            {
                "image": fname,
                "width": cam.width,
                "height": cam.height,
                "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                "rotation": cam.pose.rotation.ravel().tolist(),
                "translation": cam.pose.translation.tolist(),
            }
        )
    manifest = {"name": scene.name, "near": scene.near, "far": scene.far, "views": views}
    (directory / "scene.json").write_text(json.dumps(manifest, indent=1))


def _field(obj, key, where):
    if key not in obj:
        raise SceneFormatError(f"{where}: missing field '{key}'")
    return obj[key]


def load_scene(directory) -> SceneBundle:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "scene.json").read_text())
    except FileNotFoundError as exc:
        raise SceneFormatError(f"{directory}: missing scene.json") from exc
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"scene.json: invalid JSON ({exc})") from exc
    images, cams = [], []
    views = _field(manifest, "views", "scene.json")
    if not isinstance(views, list) or not views:
        raise SceneFormatError("scene.json: 'views' must be a non-empty list")
    for i, v in enumerate(views):
        where = f"views[{i}]"
        rot = np.asarray(_field(v, "rotation", where), dtype=np.float64)
        if rot.shape != (9,):
            raise SceneFormatError(f"{where}.rotation: expected 9 values, got shape {rot.shape}")
        trans = np.asarray(_field(v, "translation", where), dtype=np.float64)
        if trans.shape != (3,):
            raise SceneFormatError(f"{where}.translation: expected 3 values, got shape {trans.shape}")
        try:
            pose = Pose(rot.reshape(3, 3), trans)
        except InvalidPoseError as exc:
            raise SceneFormatError(f"{where}.rotation: {exc}") from exc
        w, h = int(_field(v, "width", where)), int(_field(v, "height", where))
        intr = Intrinsics(*(float(_field(v, k, where)) for k in ("fx", "fy", "cx", "cy")))
        path = directory / _field(v, "image", where)
        if not path.exists():
            raise SceneFormatError(f"{where}.image: file not found: {path.name}")
        img = read_ppm(path)
        if img.shape != (h, w, 3):
            raise SceneFormatError(f"{where}.image: size {img.shape[1]}x{img.shape[0]} != declared {w}x{h}")
        images.append(img)
        cams.append(Camera(pose, intr, w, h))
    if len({im.shape for im in images}) != 1:
        raise SceneFormatError("views: images differ in dimensions")
    near, far = float(_field(manifest, "near", "scene.json")), float(_field(manifest, "far", "scene.json"))
    if not 0 < near < far:
        raise SceneFormatError(f"near/far: need 0 < near < far, got {near}, {far}")
    return SceneBundle(images, cams, near, far, str(_field(manifest, "name", "scene.json")))


# ---------------------------------------------------------------------------
# reference selection


def _same_camera(a: Camera, b: Camera, tol=1e-9) -> bool:
    return (
        np.abs(a.pose.rotation - b.pose.rotation).max() <= tol
        and np.abs(a.pose.translation - b.pose.translation).max() <= tol
    )


def view_scores(target: Camera, pool) -> np.ndarray:
    """Optical-axis angle (radians) plus center distance over the rig diameter."""
    centers = np.array([c.pose.center for c in pool] + [target.pose.center])
    diam = np.max(np.linalg.norm(centers[:, None] - centers[None], axis=-1))
    if diam <= 0:
        diam = 1.0
    axis_t = target.pose.optical_axis
    scores = []
    for c in pool:
        cosang = np.clip(np.dot(axis_t, c.pose.optical_axis), -1.0, 1.0)
        dist = np.linalg.norm(c.pose.center - target.pose.center)
        scores.append(np.arccos(cosang) + dist / diam)
    return np.asarray(scores)


def select_reference_views(target: Camera, pool, n: int, exclude_identical: bool = True) -> list:
    """Indices of the ``n`` pool cameras nearest to ``target``, best first."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not pool:
        raise ValueError("empty camera pool")
    scores = view_scores(target, pool)
    cand = [i for i, c in enumerate(pool) if not (exclude_identical and _same_camera(c, target))]
    if len(cand) < n:
        raise ValueError(f"requested {n} reference views but only {len(cand)} candidates")
    cand.sort(key=lambda i: (scores[i], i))
    return cand[:n]
