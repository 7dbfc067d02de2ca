"""Pinhole cameras, rays, point sampling and projection.

Conventions: right-handed frames, the camera looks down +z with x right and
y down.  Extrinsics are stored world-to-camera.  Integer pixel coordinates
address pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6
REPAIR_TOL = 1e-4


class InvalidPoseError(ValueError):
    """Raised for rotations that are not (close to) proper orthonormal."""


def validate_rotation(m, name: str = "rotation") -> np.ndarray:
    """Check a 3x3 rotation, snapping small round-off back onto SO(3).

    Matrices within ``ORTHO_TOL`` are returned unchanged, those within
    ``REPAIR_TOL`` are replaced by the nearest orthogonal matrix, anything
    further away raises :class:`InvalidPoseError`.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidPoseError(f"{name}: expected shape (3, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidPoseError(f"{name}: non-finite entries")
    err = np.abs(m.T @ m - np.eye(3)).max()
    det = np.linalg.det(m)
    if err <= ORTHO_TOL and abs(det - 1.0) <= ORTHO_TOL:
        return m
    if err <= REPAIR_TOL and abs(det - 1.0) <= REPAIR_TOL:
        u, _, vt = np.linalg.svd(m)
        return u @ vt
    raise InvalidPoseError(
        f"{name}: not a proper rotation (orthogonality error {err:.3g}, det {det:.6g})"
    )


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    """Right-handed rotation about a coordinate axis, angle in radians."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", validate_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidPoseError(f"translation: expected 3 finite values, got {t}")
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (+z of the camera) in world coordinates."""
        return self.rotation[2].copy()

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise InvalidPoseError("look_at: viewing direction parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    pose: Pose
    intrinsics: Intrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def pixel_grid(self) -> np.ndarray:
        """All pixel-center coordinates, row-major, shape (H*W, 2) as (u, v)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)


@dataclass
class Rays:
    """A batch of rays; ``directions`` are unit length."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __len__(self):
        return len(self.origins)

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")


def compose_relative_rotation(target: Pose, reference: Pose) -> np.ndarray:
    """Rotation taking the reference camera frame to the target camera frame.

    The target's world-to-camera rotation composed with the reference's
    camera-to-world rotation (its transpose).  Translations do not enter.
    """
    r_t = validate_rotation(target.rotation, "target rotation")
    r_r = validate_rotation(reference.rotation, "reference rotation")
    return r_t @ r_r.T


def generate_rays(camera: Camera, pixels, near: float = 0.1, far: float = 10.0) -> Rays:
    """Back-project pixel coordinates ``(u, v)`` into world-space rays."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    k = camera.intrinsics
    d_cam = np.stack(
        [(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))],
        axis=-1,
    )
    d_world = d_cam @ camera.pose.rotation  # row-vector form of R^T d
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose.center, d_world.shape).copy()
    return Rays(origins, d_world, near, far)


def sample_depths(near: float, far: float, count: int, mode: str = "midpoint",
                  seed: int | None = None, n_rays: int = 1) -> np.ndarray:
    """Depths along rays, shape ``(n_rays, count)``, strictly increasing.

    ``midpoint`` places samples at the centers of ``count`` equal bins;
    ``stratified`` draws one uniform sample inside each bin.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    edges = np.linspace(near, far, count + 1)
    lo, width = edges[:-1], np.diff(edges)
    if mode == "midpoint":
        offsets = np.full((n_rays, count), 0.5)
    elif mode == "stratified":
        offsets = np.random.default_rng(seed).uniform(size=(n_rays, count))
        # keep samples strictly inside their bin so depths stay strictly increasing
        offsets = np.clip(offsets, 1e-6, 1 - 1e-6)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return lo + offsets * width


def sample_points(rays: Rays, count: int, mode: str = "midpoint", seed: int | None = None):
    """Sample points along each ray.

    Returns ``(positions, depths)`` with shapes ``(R, count, 3)`` and ``(R, count)``.
    """
    t = sample_depths(rays.near, rays.far, count, mode, seed, n_rays=len(rays))
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return pos, t


def project(points, camera: Camera):
    """Pinhole projection of world points.

    Returns ``(u, v, depth, valid)``; ``valid`` is true for points in front
    of the camera whose projection lands inside the image rectangle
    ``[-0.5, W - 0.5) x [-0.5, H - 0.5)``.
    """
    points = np.asarray(points, dtype=np.float64)
    cam = points @ camera.pose.rotation.T + camera.pose.translation
    depth = cam[..., 2]
    k = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[..., 0] / depth + k.cx
        v = k.fy * cam[..., 1] / depth + k.cy
    valid = (
        (depth > 0)
        & (u >= -0.5) & (u < camera.width - 0.5)
        & (v >= -0.5) & (v < camera.height - 0.5)
    )
    return u, v, depth, valid
