"""Camera model, SE(3) pose algebra, and differentiable view synthesis.

Conventions (fixed throughout the package):
  * Euler order: R = Rz(c) @ Ry(b) @ Rx(a) for a pose vector
    (tx, ty, tz, a, b, c).
  * A relative transform "t -> s" moves points written in the target camera
    frame into the source camera frame: X_s = R @ X_t + t.
  * Absolute trajectory poses are camera-to-world.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Tensor,
    bilinear_sample,
    clamp,
    concat,
    cos,
    matmul,
    reshape,
    sin,
    swap_last_axes,
)

ROT_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "cx": self.cx,
                           "cy": self.cy, "width": self.width,
                           "height": self.height}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CameraIntrinsics":
        d = json.loads(text)
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))

    @classmethod
    def from_projection_row(cls, values, width: int, height: int) -> "CameraIntrinsics":
        """Build from a flattened 3x4 projection matrix (KITTI calib row)."""
        p = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(fx=float(p[0, 0]), fy=float(p[1, 1]),
                   cx=float(p[0, 2]), cy=float(p[1, 2]),
                   width=width, height=height)


class PoseVec6:
    """Rigid motion as translation (x, y, z) plus Euler angles (a, b, c)."""

    __slots__ = ("t", "r")

    def __init__(self, t, r):
        t = np.asarray(t, dtype=np.float64).reshape(3)
        r = np.asarray(r, dtype=np.float64).reshape(3)
        if not (np.isfinite(t).all() and np.isfinite(r).all()):
            raise ValueError("pose parameters must be finite")
        if np.abs(r).max() >= math.pi:
            raise ValueError("Euler angles must satisfy |angle| < pi")
        self.t = t
        self.r = r

    @classmethod
    def identity(cls) -> "PoseVec6":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, v) -> "PoseVec6":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.t, self.r])

    def __repr__(self):
        return f"PoseVec6(t={self.t.tolist()}, r={self.r.tolist()})"


class SE3Transform:
    """Rigid transform with an orthonormal rotation and a translation."""

    __slots__ = ("R", "t")

    def __init__(self, R, t, validate: bool = True):
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if validate:
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-5:
                raise ValueError("rotation is not orthonormal")
            if abs(np.linalg.det(R) - 1.0) > 1e-5:
                raise ValueError("rotation determinant is not 1")
        self.R = R
        self.t = t

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls(np.eye(3), np.zeros(3), validate=False)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, m, validate: bool = True) -> "SE3Transform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], validate=validate)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3, N) points."""
        return self.R @ points + self.t[:, None]

    def __repr__(self):
        return f"SE3Transform(t={self.t.tolist()})"


def rotation_from_euler(r: np.ndarray) -> np.ndarray:
    """R = Rz(c) @ Ry(b) @ Rx(a) for angles r = (a, b, c) in radians."""
    a, b, c = float(r[0]), float(r[1]), float(r[2])
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    return np.array([
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ])


def euler_from_rotation(R: np.ndarray) -> np.ndarray:
    """Recover (a, b, c) with R = Rz(c) @ Ry(b) @ Rx(a); assumes |b| < pi/2."""
    b = math.asin(max(-1.0, min(1.0, -float(R[2, 0]))))
    a = math.atan2(float(R[2, 1]), float(R[2, 2]))
    c = math.atan2(float(R[1, 0]), float(R[0, 0]))
    return np.array([a, b, c])


def pose_from_params(v: PoseVec6) -> SE3Transform:
    """Euler 6-vector to rigid transform."""
    return SE3Transform(rotation_from_euler(v.r), v.t.copy(), validate=False)


def pose_to_params(T: SE3Transform) -> PoseVec6:
    """Inverse of pose_from_params away from gimbal lock."""
    return PoseVec6(T.t.copy(), euler_from_rotation(T.R))


def compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """compose(a, b) applies b first, then a."""
    return SE3Transform(a.R @ b.R, a.R @ b.t + a.t, validate=False)


def invert(a: SE3Transform) -> SE3Transform:
    return SE3Transform(a.R.T, -a.R.T @ a.t, validate=False)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians via the trace formula, domain-clamped."""
    return math.acos(max(-1.0, min(1.0, (float(np.trace(R)) - 1.0) / 2.0)))


# -- differentiable path -------------------------------------------------------


def rotation_tensor(rvec: Tensor) -> Tensor:
    """(N, 3) Euler angles -> (N, 3, 3) rotation matrices, differentiable."""
    a = rvec[:, 0:1]
    b = rvec[:, 1:2]
    c = rvec[:, 2:3]
    ca, sa = cos(a), sin(a)
    cb, sb = cos(b), sin(b)
    cc, sc = cos(c), sin(c)
    rows = [
        cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa,
        sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa,
        -sb, cb * sa, cb * ca,
    ]
    flat = concat(rows, axis=1)
    return reshape(flat, (rvec.shape[0], 3, 3))


def pose_rt_tensors(pose, batch: int, dtype):
    """Pose in any accepted form -> rotation (N, 3, 3) and translation (N, 3, 1).

    Accepts a PoseVec6, a (6,) or (N, 6) parameter tensor, or an already
    built (R, t) tensor pair (which passes through unchanged).
    """
    if isinstance(pose, tuple):
        rot, trans = pose
        return rot, trans
    if isinstance(pose, PoseVec6):
        pose = Tensor(np.broadcast_to(pose.as_array().astype(dtype), (batch, 6)).copy())
    elif not isinstance(pose, Tensor):
        pose = Tensor(np.asarray(pose, dtype=dtype))
    if pose.data.ndim == 1:
        pose = reshape(pose, (1, 6))
    if pose.data.shape != (batch, 6) and pose.data.shape != (1, 6):
        raise ValueError("pose must be a 6-vector or an (N, 6) batch")
    rot = rotation_tensor(pose[:, 3:6])
    trans = reshape(pose[:, 0:3], (pose.data.shape[0], 3, 1))
    return rot, trans


def invert_pose_tensors(rot: Tensor, trans: Tensor):
    """Differentiable rigid-transform inverse: (R, t) -> (R^T, -R^T t)."""
    rot_t = swap_last_axes(rot)
    return rot_t, -matmul(rot_t, trans)


_RAY_CACHE: dict = {}


def pixel_rays(K: CameraIntrinsics, dtype=np.float64) -> np.ndarray:
    """(3, H*W) unit-depth camera rays, cached per intrinsics and dtype."""
    key = (K.fx, K.fy, K.cx, K.cy, K.width, K.height, np.dtype(dtype).str)
    rays = _RAY_CACHE.get(key)
    if rays is None:
        us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
        rays = np.stack([(us.ravel() - K.cx) / K.fx,
                         (vs.ravel() - K.cy) / K.fy,
                         np.ones(K.width * K.height)]).astype(dtype)
        _RAY_CACHE[key] = rays
    return rays


MIN_WARP_DEPTH = 1e-3


def synthesize_view(image_src, depth_tgt, pose_t_to_s, K: CameraIntrinsics):
    """Warp the source image into the target view through the target depth.

    Each target pixel is backprojected with its depth, moved by the
    target-to-source transform, projected, and bilinearly sampled from the
    source image.  Returns the synthesized image and a validity mask that is
    true where the projection landed in bounds with positive depth.
    Differentiable in the source image, the depth, and the 6 pose parameters.

    ``pose_t_to_s`` takes any form pose_rt_tensors accepts.
    """
    if not isinstance(image_src, Tensor):
        image_src = Tensor(image_src)
    if not isinstance(depth_tgt, Tensor):
        depth_tgt = Tensor(depth_tgt)
    n, _, h, w = image_src.data.shape
    if depth_tgt.data.shape != (n, 1, h, w):
        raise ValueError("depth must be (N, 1, H, W) matching the image")
    if (h, w) != (K.height, K.width):
        raise ValueError("image size does not match the intrinsics")
    if depth_tgt.data.min() <= 0:
        raise ValueError("depth must be positive everywhere")

    dtype = image_src.data.dtype
    rot, trans = pose_rt_tensors(pose_t_to_s, n, dtype)

    rays = Tensor(pixel_rays(K, dtype))            # (3, HW)
    cam = reshape(depth_tgt, (n, 1, h * w)) * rays  # (N, 3, HW)
    moved = matmul(rot, cam) + trans               # (N, 3, HW)

    x = moved[:, 0:1, :]
    y = moved[:, 1:2, :]
    z = moved[:, 2:3, :]
    z_safe = clamp(z, lo=MIN_WARP_DEPTH)
    u = (x / z_safe) * K.fx + K.cx
    v = (y / z_safe) * K.fy + K.cy
    grid = reshape(concat([u, v], axis=1), (n, 2, h, w))
    # (N, 2, H, W) -> (N, H, W, 2) without a transpose op: sample u and v maps
    grid = concat([reshape(grid[:, 0], (n, h, w, 1)),
                   reshape(grid[:, 1], (n, h, w, 1))], axis=3)

    synthesized, in_bounds = bilinear_sample(image_src, grid)
    validity = in_bounds & (z.data > 0).reshape(n, 1, h, w)
    return synthesized, validity
