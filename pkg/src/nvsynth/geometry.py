"""Pinhole camera math, rigid transforms, and the latent-code transformation.

Conventions, used consistently by the renderer, the warper, and the model:

* Pixel (i, j) of an image has continuous coordinates (j + 0.5, i + 0.5);
  the image spans [0, W] x [0, H].
* Camera frame: x right, y down, z forward (right-handed); a point is in
  front of the camera when its camera-space z is positive.
* ``RigidTransform`` maps points of one frame into another as R p + t.
* Orbit cameras sit on a sphere of given radius around the world origin
  (world +y up), look at the origin, and at azimuth 0 / elevation 0 the
  camera is at (0, 0, -radius).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

Z_EPS = 1e-6  # behind-camera threshold, scene units
_ROT_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in pixels, tied to an image of width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def scale_to_level(self, s: float) -> "Intrinsics":
        """Intrinsics of the same camera at resolution scaled by ``s``."""
        if s <= 0:
            raise ValueError(f"scale must be positive, got {s}")
        return Intrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                          self.width * s, self.height * s)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform p -> R p + t with an orthonormal, det +1 rotation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ROT_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def translation(t) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.asarray(t, dtype=np.float64))

    def is_identity(self) -> bool:
        return np.array_equal(self.R, np.eye(3)) and np.array_equal(self.t, np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape [..., 3] (plain arrays, no gradients)."""
        return points @ self.R.T + self.t


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def invert(t: RigidTransform) -> RigidTransform:
    return RigidTransform(t.R.T, -t.R.T @ t.t)


def relative_transform(world_to_src: RigidTransform, world_to_tgt: RigidTransform) -> RigidTransform:
    """Source-camera-to-target-camera transform from two world-to-camera poses."""
    return compose(world_to_tgt, invert(world_to_src))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at eye and target coincide")
    z = fwd / n
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("look_at view direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ eye)


def pose_from_orbit(azimuth_deg: float, elevation_deg: float, radius: float) -> RigidTransform:
    """World-to-camera pose on the orbit sphere (see module conventions)."""
    if radius <= 0:
        raise ValueError(f"orbit radius must be positive, got {radius}")
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = radius * np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
    return look_at(eye, (0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# plain-array projection helpers (renderer and oracles; no autodiff)


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous coordinates of all pixel centers, each [H, W]."""
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    return np.broadcast_to(xs, (height, width)).copy(), np.broadcast_to(ys[:, None], (height, width)).copy()


def ray_directions(k: Intrinsics) -> np.ndarray:
    """Unit-depth camera-space ray directions per pixel, shape [3, H, W]."""
    w, h = int(round(k.width)), int(round(k.height))
    xg, yg = pixel_centers(w, h)
    return np.stack([(xg - k.cx) / k.fx, (yg - k.cy) / k.fy, np.ones((h, w))])


def backproject(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Camera-space points [3, H, W] from a depth map [H, W] (camera-space z)."""
    return ray_directions(k) * np.asarray(depth)[None]


def project(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel coordinates (x, y) and depth z of camera-space points [3, ...]."""
    x, y, z = points[0], points[1], points[2]
    zc = np.where(np.abs(z) < Z_EPS, Z_EPS, z)
    return k.fx * x / zc + k.cx, k.fy * y / zc + k.cy, z


# ---------------------------------------------------------------------------
# differentiable pieces


@dataclass
class LatentPointSet:
    """Transformation-equivariant latent code: B batches of n 3-d points."""

    points: Tensor

    def __post_init__(self):
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"latent points must be [B, n, 3], got {self.points.shape}")
        if not np.isfinite(self.points.data).all():
            raise ValueError("latent points must be finite")

    @property
    def batch(self) -> int:
        return self.points.shape[0]

    @property
    def count(self) -> int:
        return self.points.shape[1]


@dataclass
class CorrespondenceField:
    """Per target pixel: continuous source coordinates and a validity mask.

    ``coords`` is a Tensor [B, 2, H, W] (x then y); ``valid`` is a boolean
    array [B, 1, H, W], false where the back-projected point lies behind
    the source camera or beyond the image bounds by more than one pixel.
    """

    coords: Tensor
    valid: np.ndarray


TransformArg = Union[RigidTransform, Sequence[RigidTransform]]


def _batch_transforms(t: TransformArg, batch: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(t, RigidTransform):
        ts = [t] * batch
    else:
        ts = list(t)
        if len(ts) != batch:
            raise ValueError(f"got {len(ts)} transforms for batch size {batch}")
    R = np.stack([x.R for x in ts])
    tr = np.stack([x.t for x in ts])
    return R, tr


def transform_latent(z: LatentPointSet, t: TransformArg) -> LatentPointSet:
    """Rigidly move every latent point: p -> R p + t (differentiable in z)."""
    R, tr = _batch_transforms(t, z.batch)
    rt = Tensor(np.ascontiguousarray(R.transpose(0, 2, 1)))
    moved = T.add(T.matmul(z.points, rt), Tensor(tr[:, None, :]))
    return LatentPointSet(moved)


def correspondence_field(depth_t: Tensor, k: Intrinsics, t_to_s: TransformArg) -> CorrespondenceField:
    """Source-pixel coordinates for each target pixel, via its depth.

    Back-projects every target pixel with ``depth_t`` [B,1,H,W], moves it by
    ``t_to_s``, and projects with the same intrinsics. Differentiable w.r.t.
    depth. Written so the identity transform returns the pixel grid exactly.
    Pixels behind the source camera or nonpositive-depth pixels come back
    invalid rather than failing.
    """
    if depth_t.ndim != 4 or depth_t.shape[1] != 1:
        raise ValueError(f"depth must be [B,1,H,W], got {depth_t.shape}")
    b, _, h, w = depth_t.shape
    if int(round(k.width)) != w or int(round(k.height)) != h:
        raise ValueError(
            f"intrinsics are for {k.width}x{k.height} but depth is {w}x{h}; "
            "scale_to_level first"
        )
    R, tr = _batch_transforms(t_to_s, b)

    xg, yg = pixel_centers(w, h)
    xg = xg[None, None]
    yg = yg[None, None]
    dx = (xg - k.cx) / k.fx
    dy = (yg - k.cy) / k.fy

    def c(v):  # per-batch scalar constant, broadcastable over [B,1,H,W]
        return Tensor(np.asarray(v).reshape(b, 1, 1, 1))

    X = T.mul(depth_t, Tensor(dx))
    Y = T.mul(depth_t, Tensor(dy))
    Z = depth_t
    Xs = T.add(T.add(T.mul(X, c(R[:, 0, 0])), T.mul(Y, c(R[:, 0, 1]))),
               T.add(T.mul(Z, c(R[:, 0, 2])), c(tr[:, 0])))
    Ys = T.add(T.add(T.mul(X, c(R[:, 1, 0])), T.mul(Y, c(R[:, 1, 1]))),
               T.add(T.mul(Z, c(R[:, 1, 2])), c(tr[:, 1])))
    Zs = T.add(T.add(T.mul(X, c(R[:, 2, 0])), T.mul(Y, c(R[:, 2, 1]))),
               T.add(T.mul(Z, c(R[:, 2, 2])), c(tr[:, 2])))

    # residual form: exactly the pixel grid when the transform is identity
    zc = T.clamp_min(Zs, Z_EPS)
    xs = T.add(Tensor(xg), T.div(T.mul(T.sub(Xs, T.mul(Zs, Tensor(dx))), k.fx), zc))
    ys = T.add(Tensor(yg), T.div(T.mul(T.sub(Ys, T.mul(Zs, Tensor(dy))), k.fy), zc))

    in_front = (Zs.data > Z_EPS) & (depth_t.data > 0)
    inside = (
        (xs.data >= -1.0) & (xs.data <= k.width + 1.0)
        & (ys.data >= -1.0) & (ys.data <= k.height + 1.0)
    )
    valid = in_front & inside
    coords = T.concat_channels(xs, ys)
    return CorrespondenceField(coords=coords, valid=valid)
