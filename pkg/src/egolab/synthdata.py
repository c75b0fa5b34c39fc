"""Desk-scale synthetic scenes with exact ground truth, dataset disk layout,
KITTI-odometry ingestion, and snippet iteration.

Scenes are ray-cast against simple world-fixed geometry textured with a sum
of low-frequency sinusoids, smooth enough that bilinear warping reproduces
frames almost exactly.  Rendering is deterministic per seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, PoseVec6, SE3Transform, compose, invert, pixel_rays, pose_from_params
from .odomeval import read_pose_file, write_pose_file


class RenderError(ValueError):
    """Camera placed behind or inside the scene geometry."""


@dataclass(frozen=True)
class FrontoPlane:
    depth: float


@dataclass(frozen=True)
class SlantedPlane:
    normal: tuple
    offset: float


@dataclass(frozen=True)
class RandomHeightfield:
    base_depth: float
    amplitude: float
    smoothness: float = 4.0   # spatial wavelength scale, world units
    waves: int = 6


@dataclass(frozen=True)
class SceneConfig:
    texture_seed: int
    geometry: object
    image_size: tuple
    intrinsics: CameraIntrinsics
    texture_waves: int = 8
    texture_freq: tuple = (0.1, 0.7)

    def __post_init__(self):
        h, w = self.image_size
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ValueError("image_size must match the intrinsics extents")


class _SinusoidField:
    """Band-limited scalar field over world points: sum of random sinusoids."""

    def __init__(self, rng, waves, freq_lo, freq_hi, channels=1, span=0.45):
        dirs = rng.normal(size=(channels, waves, 3))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        freqs = rng.uniform(freq_lo, freq_hi, (channels, waves, 1))
        self.k = dirs * freqs
        self.phase = rng.uniform(0, 2 * math.pi, (channels, waves))
        amps = rng.uniform(0.3, 1.0, (channels, waves))
        self.amp = amps / amps.sum(axis=1, keepdims=True) * span

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """(3, P) world points -> (channels, P) values in [-span, span]."""
        phase = np.einsum("cwk,kp->cwp", self.k, points) + self.phase[..., None]
        return np.einsum("cw,cwp->cp", self.amp, np.sin(phase))


def _texture(scene: SceneConfig) -> _SinusoidField:
    rng = np.random.default_rng(scene.texture_seed)
    lo, hi = scene.texture_freq
    return _SinusoidField(rng, scene.texture_waves, lo, hi, channels=3)


def _heightfield_fn(geom: RandomHeightfield, seed: int) -> _SinusoidField:
    rng = np.random.default_rng(seed)
    freq = 2 * math.pi / geom.smoothness
    return _SinusoidField(rng, geom.waves, 0.3 * freq, freq, channels=1, span=1.0)


def _intersect_plane(normal, offset, pose: SE3Transform, rays: np.ndarray) -> np.ndarray:
    n_w = np.asarray(normal, dtype=np.float64)
    n_c = pose.R.T @ n_w
    d_c = offset - float(n_w @ pose.t)
    denom = n_c @ rays
    if np.abs(denom).min() < 1e-9:
        raise RenderError("view ray parallel to the scene plane")
    lam = d_c / denom
    if lam.min() <= 0:
        raise RenderError("camera behind or inside the scene plane")
    return lam


def _intersect_heightfield(geom: RandomHeightfield, hfield, pose: SE3Transform,
                           rays: np.ndarray) -> np.ndarray:
    dirs = pose.R @ rays
    origin = pose.t[:, None]
    if dirs[2].min() <= 1e-6:
        raise RenderError("view ray not facing the heightfield")

    def residual(lam):
        pts = origin + lam * dirs
        lateral = np.vstack([pts[0], pts[1], np.zeros_like(pts[0])])
        return pts[2] - geom.base_depth - geom.amplitude * hfield(lateral)[0]

    lo = (geom.base_depth - geom.amplitude - pose.t[2]) / dirs[2]
    hi = (geom.base_depth + geom.amplitude - pose.t[2]) / dirs[2]
    if lo.min() <= 0:
        raise RenderError("camera inside or beyond the heightfield band")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        above = residual(mid) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def render_frame(scene: SceneConfig, pose: SE3Transform, texture=None, hfield=None):
    """Render (rgb (3, H, W) in [0, 1], depth (H, W)) for one camera pose."""
    h, w = scene.image_size
    rays = pixel_rays(scene.intrinsics)
    if texture is None:
        texture = _texture(scene)
    geom = scene.geometry
    if isinstance(geom, FrontoPlane):
        lam = _intersect_plane((0.0, 0.0, 1.0), geom.depth, pose, rays)
    elif isinstance(geom, SlantedPlane):
        lam = _intersect_plane(geom.normal, geom.offset, pose, rays)
    elif isinstance(geom, RandomHeightfield):
        if hfield is None:
            hfield = _heightfield_fn(geom, scene.texture_seed)
        lam = _intersect_heightfield(geom, hfield, pose, rays)
    else:
        raise TypeError(f"unknown geometry {type(geom)!r}")
    points_cam = lam * rays
    points_world = pose.apply(points_cam)
    rgb = 0.5 + texture(points_world)
    # ray z-component is 1, so the ray parameter is the camera-frame depth
    return rgb.reshape(3, h, w), lam.reshape(h, w).copy()


@dataclass
class SequenceDataset:
    frames: np.ndarray                 # (N, 3, H, W) in [0, 1]
    intrinsics: CameraIntrinsics
    depths: np.ndarray | None = None   # (N, H, W)
    poses: list | None = None          # camera-to-world SE3Transform
    frame_indices: list = None
    meters_per_unit: float = 1.0

    def __post_init__(self):
        if self.frame_indices is None:
            self.frame_indices = list(range(len(self.frames)))
        if self.poses is not None and len(self.poses) != len(self.frames):
            raise ValueError("pose count must equal frame count")

    def __len__(self):
        return len(self.frames)


def generate_sequence(scene: SceneConfig, trajectory, seed: int = 0,
                      meters_per_unit: float = 1.0) -> SequenceDataset:
    """Ray-cast the scene along a camera trajectory with exact ground truth.

    ``trajectory`` is a list of absolute camera-to-world poses, as PoseVec6
    or SE3Transform.  ``seed`` perturbs the texture stream so distinct
    datasets from one scene config stay decorrelated.
    """
    poses = [pose_from_params(p) if isinstance(p, PoseVec6) else p
             for p in trajectory]
    mixed = SceneConfig(
        texture_seed=int(np.random.SeedSequence([scene.texture_seed, seed]).generate_state(1)[0]),
        geometry=scene.geometry, image_size=scene.image_size,
        intrinsics=scene.intrinsics, texture_waves=scene.texture_waves,
        texture_freq=scene.texture_freq)
    texture = _texture(mixed)
    hfield = _heightfield_fn(scene.geometry, mixed.texture_seed + 1) \
        if isinstance(scene.geometry, RandomHeightfield) else None
    frames, depths = [], []
    for pose in poses:
        rgb, depth = render_frame(mixed, pose, texture=texture, hfield=hfield)
        frames.append(rgb)
        depths.append(depth)
    return SequenceDataset(frames=np.stack(frames), depths=np.stack(depths),
                           poses=poses, intrinsics=scene.intrinsics,
                           meters_per_unit=meters_per_unit)


# -- disk layout -----------------------------------------------------------------


def save_dataset(ds: SequenceDataset, out_dir) -> None:
    """frames/ as 8-bit PNG, depth/ as float32 LE raw, poses.txt, intrinsics.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    if ds.depths is not None:
        (out / "depth").mkdir(exist_ok=True)
    for i, frame in enumerate(ds.frames):
        img = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0)).save(out / "frames" / f"{i:06d}.png")
        if ds.depths is not None:
            (out / "depth" / f"{i:06d}.raw").write_bytes(
                ds.depths[i].astype("<f4").tobytes())
    if ds.poses is not None:
        write_pose_file(out / "poses.txt", ds.poses)
    meta = json.loads(ds.intrinsics.to_json())
    meta["meters_per_unit"] = ds.meters_per_unit
    (out / "intrinsics.json").write_text(json.dumps(meta, indent=2))


def load_dataset(path) -> SequenceDataset:
    root = Path(path)
    meta = json.loads((root / "intrinsics.json").read_text())
    intrinsics = CameraIntrinsics.from_json(json.dumps(meta))
    frame_paths = sorted((root / "frames").glob("*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no frames under {root / 'frames'}")
    frames = np.stack([
        np.asarray(Image.open(p), dtype=np.float64).transpose(2, 0, 1) / 255.0
        for p in frame_paths])
    depths = None
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        h, w = intrinsics.height, intrinsics.width
        depth_paths = sorted(depth_dir.glob("*.raw"))
        if len(depth_paths) != len(frame_paths):
            raise ValueError("depth sidecar count does not match frame count")
        depths = np.stack([
            np.frombuffer(p.read_bytes(), dtype="<f4").reshape(h, w).astype(np.float64)
            for p in depth_paths])
    poses = None
    pose_path = root / "poses.txt"
    if pose_path.exists():
        poses = read_pose_file(pose_path)
        if len(poses) != len(frames):
            raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    return SequenceDataset(frames=frames, depths=depths, poses=poses,
                           intrinsics=intrinsics,
                           meters_per_unit=float(meta.get("meters_per_unit", 1.0)))


def load_kitti_sequence(path) -> SequenceDataset:
    """KITTI odometry sequence directory: image_2/*.png, calib.txt,
    optional poses.txt."""
    root = Path(path)
    image_dir = root / "image_2"
    frame_paths = sorted(image_dir.glob("*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no images under {image_dir}")
    first = np.asarray(Image.open(frame_paths[0]))
    height, width = first.shape[0], first.shape[1]
    shapes = set()
    frames = []
    for p in frame_paths:
        arr = np.asarray(Image.open(p), dtype=np.float64)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        shapes.add(arr.shape)
        frames.append(arr.transpose(2, 0, 1) / 255.0)
    if len(shapes) != 1:
        raise ValueError(f"ragged image sizes in {image_dir}: {sorted(shapes)}")

    calib = _parse_calib(root / "calib.txt")
    row = calib.get("P2", calib.get("P0"))
    if row is None:
        raise ValueError(f"{root / 'calib.txt'}: no P2 or P0 row")
    intrinsics = CameraIntrinsics.from_projection_row(row, width, height)

    poses = None
    pose_path = root / "poses.txt"
    if pose_path.exists():
        poses = read_pose_file(pose_path)
        if len(poses) != len(frames):
            raise ValueError(f"{len(frames)} images but {len(poses)} poses")
    return SequenceDataset(frames=np.stack(frames), intrinsics=intrinsics,
                           poses=poses)


def _parse_calib(path) -> dict:
    calib = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            values = rest.split()
            if len(values) != 12:
                raise ValueError(f"{path}:{lineno}: expected 12 calib values")
            calib[key.strip()] = [float(v) for v in values]
    return calib


# -- snippets --------------------------------------------------------------------


@dataclass
class FrameData:
    image: np.ndarray              # (3, H, W)
    depth: np.ndarray | None = None


@dataclass
class Snippet:
    index: int
    target: FrameData
    sources: list
    intrinsics: CameraIntrinsics
    gt_relative_poses: list | None = None   # rel(t->s) = invert(T_t) o T_s

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a snippet needs at least one source frame")


def snippets(ds: SequenceDataset, context: str = "two_source", stride: int = 1):
    """Iterate (sources, target) groups: (t-1, t, t+1) or (t, t+1) pairs.

    Ground-truth relative poses, when absolute poses are present, follow the
    rel(t->s) = invert(T_t) o T_s convention (pose of the source camera
    expressed in the target frame).
    """
    if context not in ("two_source", "one_source"):
        raise ValueError("context must be 'two_source' or 'one_source'")
    n = len(ds)
    if context == "two_source":
        if n < 3:
            raise ValueError("two_source context needs at least 3 frames")
        centers = range(1, n - 1, stride)
        offsets = (-1, 1)
    else:
        if n < 2:
            raise ValueError("one_source context needs at least 2 frames")
        centers = range(0, n - 1, stride)
        offsets = (1,)

    for t in centers:
        src_ids = [t + o for o in offsets]
        rels = None
        if ds.poses is not None:
            inv_t = invert(ds.poses[t])
            rels = [compose(inv_t, ds.poses[s]) for s in src_ids]
        yield Snippet(
            index=t,
            target=FrameData(image=ds.frames[t],
                             depth=None if ds.depths is None else ds.depths[t]),
            sources=[FrameData(image=ds.frames[s],
                               depth=None if ds.depths is None else ds.depths[s])
                     for s in src_ids],
            intrinsics=ds.intrinsics,
            gt_relative_poses=rels,
        )
