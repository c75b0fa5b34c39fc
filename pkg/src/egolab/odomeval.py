"""Trajectory evaluation: stacking, scale alignment, snippet ATE,
100-800 m translational/rotational drift, and depth metrics.

Relative-pose convention for ``stack_trajectory``: each input x_{t->t+1}
moves points from the frame-t camera into the frame-t+1 camera (the warp
convention the pose network is trained in); stacking inverts it to recover
camera-to-world motion, so T_0 = I and T_{k+1} = T_k o invert(x_{k->k+1}).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3Transform, compose, invert, rotation_angle

DRIFT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
DEGENERATE_EPS = 1e-9


@dataclass
class Trajectory:
    poses: list
    frame_indices: list = None

    def __post_init__(self):
        if self.frame_indices is None:
            self.frame_indices = list(range(len(self.poses)))
        if len(self.frame_indices) != len(self.poses):
            raise ValueError("frame index count must match pose count")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def re_origined(self) -> "Trajectory":
        """Left-multiply by the inverse first pose so the trajectory starts at I."""
        first_inv = invert(self.poses[0])
        return Trajectory([compose(first_inv, p) for p in self.poses],
                          list(self.frame_indices))


def stack_trajectory(relatives) -> Trajectory:
    """Accumulate frame-to-frame transforms into absolute poses (T_0 = I)."""
    if len(relatives) == 0:
        raise ValueError("stack_trajectory needs at least one relative pose")
    poses = [SE3Transform.identity()]
    for rel in relatives:
        poses.append(compose(poses[-1], invert(rel)))
    return Trajectory(poses)


def relatives_from_trajectory(traj: Trajectory):
    """Inverse of stack_trajectory: point-transport transforms x_{k->k+1}."""
    return [compose(invert(traj.poses[k + 1]), traj.poses[k])
            for k in range(len(traj) - 1)]


def snippet_scale_align(pred: Trajectory, gt: Trajectory, window: int = 5):
    """Rescale predicted translations per consecutive window of frames.

    Every block of (window - 1) relative motions gets one scalar: the ratio
    of ground-truth to predicted cumulative translation length over the
    block.  Windows with near-zero predicted length keep scale 1 and are
    counted as degenerate.  Returns (scaled trajectory, scales, degenerate).
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(pred) != len(gt):
        raise ValueError("trajectory length mismatch")
    rel_pred = relatives_from_trajectory(pred)
    rel_gt = relatives_from_trajectory(gt)
    per = window - 1
    scales = []
    degenerate = 0
    scaled = []
    for start in range(0, len(rel_pred), per):
        chunk_p = rel_pred[start:start + per]
        chunk_g = rel_gt[start:start + per]
        len_p = sum(np.linalg.norm(r.t) for r in chunk_p)
        len_g = sum(np.linalg.norm(r.t) for r in chunk_g)
        if len_p < DEGENERATE_EPS:
            s = 1.0
            degenerate += 1
        else:
            s = len_g / len_p
        scales.append(s)
        scaled.extend(SE3Transform(r.R, r.t * s, validate=False) for r in chunk_p)
    return stack_trajectory(scaled), scales, degenerate


@dataclass
class AteResult:
    mean: float
    std: float
    snippets: int
    skipped: int


def ate_snippets(pred: Trajectory, gt: Trajectory, snippet_len: int = 5) -> AteResult:
    """RMSE of positions over all overlapping snippets, each re-origined at
    its first frame and scale-aligned by a least-squares scalar.

    Zero-motion predicted snippets (scale undefined) are skipped and counted.
    """
    if snippet_len not in (3, 5):
        raise ValueError("snippet_len must be 3 or 5")
    if len(pred) != len(gt):
        raise ValueError("trajectory length mismatch")
    if len(pred) < snippet_len:
        raise ValueError("trajectory shorter than the snippet length")
    errors = []
    skipped = 0
    for start in range(len(pred) - snippet_len + 1):
        first_p = invert(pred.poses[start])
        first_g = invert(gt.poses[start])
        p = np.stack([compose(first_p, pred.poses[start + i]).t
                      for i in range(snippet_len)])
        g = np.stack([compose(first_g, gt.poses[start + i]).t
                      for i in range(snippet_len)])
        denom = float((p * p).sum())
        if denom < DEGENERATE_EPS:
            skipped += 1
            continue
        s = float((p * g).sum()) / denom
        errors.append(math.sqrt(float(((s * p - g) ** 2).sum(axis=1).mean())))
    if not errors:
        return AteResult(mean=float("nan"), std=float("nan"), snippets=0,
                         skipped=skipped)
    return AteResult(mean=float(np.mean(errors)), std=float(np.std(errors)),
                     snippets=len(errors), skipped=skipped)


@dataclass
class RelDriftResult:
    t_rel: float           # percent
    r_rel: float           # degrees per 100 m
    per_length: dict = field(default_factory=dict)
    pairs: int = 0
    insufficient_length: bool = False


def rel_drift(pred: Trajectory, gt: Trajectory, lengths=DRIFT_LENGTHS,
              step: int = 10, meters_per_unit: float = 1.0) -> RelDriftResult:
    """KITTI drift protocol over subsequences of fixed path length.

    For every start frame (subsampled by ``step``) and target length L, the
    end frame is the first whose ground-truth path length has grown by at
    least L.  The error transform E = invert(rel_gt) o rel_pred yields
    ||t(E)|| / L as translational drift and angle(R(E)) / L as rotational
    drift.  ``meters_per_unit`` converts desk-scale trajectory units to the
    metric lengths of the protocol.
    """
    if len(pred) != len(gt):
        raise ValueError("trajectory length mismatch")
    n = len(gt)
    dist = np.zeros(n)
    gpos = gt.positions() * meters_per_unit
    for i in range(1, n):
        dist[i] = dist[i - 1] + float(np.linalg.norm(gpos[i] - gpos[i - 1]))

    t_errs, r_errs = [], []
    by_length = {float(l): {"t": [], "r": []} for l in lengths}
    for start in range(0, n, step):
        for length in lengths:
            target = dist[start] + length
            rest = np.nonzero(dist[start:] >= target - 1e-12)[0]
            if rest.size == 0:
                continue
            end = start + int(rest[0])
            if end == start:
                continue
            rel_g = compose(invert(gt.poses[start]), gt.poses[end])
            rel_p = compose(invert(pred.poses[start]), pred.poses[end])
            err = compose(invert(rel_g), rel_p)
            t_err = float(np.linalg.norm(err.t)) * meters_per_unit / length * 100.0
            r_err = math.degrees(rotation_angle(err.R)) / length * 100.0
            t_errs.append(t_err)
            r_errs.append(r_err)
            by_length[float(length)]["t"].append(t_err)
            by_length[float(length)]["r"].append(r_err)
    if not t_errs:
        return RelDriftResult(t_rel=float("nan"), r_rel=float("nan"),
                              per_length={}, pairs=0, insufficient_length=True)
    per_length = {
        length: {"t_rel": float(np.mean(v["t"])), "r_rel": float(np.mean(v["r"])),
                 "count": len(v["t"])}
        for length, v in by_length.items() if v["t"]
    }
    return RelDriftResult(t_rel=float(np.mean(t_errs)), r_rel=float(np.mean(r_errs)),
                          per_length=per_length, pairs=len(t_errs))


def global_scale_align(pred: Trajectory, gt: Trajectory):
    """One least-squares scalar over all positions, applied to every
    predicted translation."""
    if len(pred) != len(gt):
        raise ValueError("trajectory length mismatch")
    p = pred.positions()
    g = gt.positions()
    denom = float((p * p).sum())
    if denom < DEGENERATE_EPS:
        raise ValueError("predicted positions are all zero; scale undefined")
    s = float((p * g).sum()) / denom
    scaled = Trajectory([SE3Transform(q.R, q.t * s, validate=False) for q in pred.poses],
                        list(pred.frame_indices))
    return scaled, s


@dataclass
class DepthReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float


def depth_metrics(pred_depths, gt_depths, min_d: float, max_d: float) -> DepthReport:
    """Median-scaled Eigen depth metrics, averaged per image then over images.

    Evaluation is restricted to ground-truth values inside [min_d, max_d].
    """
    pred_depths = np.asarray(pred_depths, dtype=np.float64)
    gt_depths = np.asarray(gt_depths, dtype=np.float64)
    if pred_depths.shape != gt_depths.shape:
        raise ValueError("depth map shape mismatch")
    if pred_depths.ndim == 2:
        pred_depths = pred_depths[None]
        gt_depths = gt_depths[None]

    rows = []
    for p_map, g_map in zip(pred_depths, gt_depths):
        valid = (g_map >= min_d) & (g_map <= max_d)
        if not valid.any():
            continue
        g = g_map[valid]
        p = p_map[valid]
        p = p * (np.median(g) / np.median(p))
        p = np.clip(p, 1e-12, None)
        ratio = np.maximum(p / g, g / p)
        rows.append((
            float(np.mean(np.abs(p - g) / g)),
            float(np.mean((p - g) ** 2 / g)),
            float(np.sqrt(np.mean((p - g) ** 2))),
            float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
            float(np.mean(ratio < 1.25)),
        ))
    if not rows:
        raise ValueError("no ground-truth depths inside [min_d, max_d]")
    agg = np.mean(np.array(rows), axis=0)
    return DepthReport(abs_rel=float(agg[0]), sq_rel=float(agg[1]),
                       rmse=float(agg[2]), rmse_log=float(agg[3]),
                       delta1=float(agg[4]))


@dataclass
class MetricsReport:
    ate_mean: float = float("nan")
    ate_std: float = float("nan")
    t_rel: float = float("nan")
    r_rel: float = float("nan")
    per_length: dict = field(default_factory=dict)
    depth: DepthReport | None = None

    SCHEMA_VERSION = 1

    def to_json(self) -> str:
        payload = {
            "schema_version": self.SCHEMA_VERSION,
            "ate_mean": self.ate_mean,
            "ate_std": self.ate_std,
            "t_rel": self.t_rel,
            "r_rel": self.r_rel,
            "per_length": {str(int(k)): v for k, v in self.per_length.items()},
        }
        if self.depth is not None:
            payload["depth"] = {
                "abs_rel": self.depth.abs_rel, "sq_rel": self.depth.sq_rel,
                "rmse": self.depth.rmse, "rmse_log": self.depth.rmse_log,
                "delta1": self.depth.delta1,
            }
        return json.dumps(payload, indent=2, sort_keys=True)


# -- pose files -----------------------------------------------------------------


def read_pose_file(path) -> list:
    """KITTI 12-number pose lines -> camera-to-world transforms."""
    poses = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            values = line.split()
            if len(values) != 12:
                raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
            m = np.array([float(v) for v in values]).reshape(3, 4)
            poses.append(SE3Transform(m[:, :3], m[:, 3]))
    return poses


def write_pose_file(path, poses) -> None:
    """Write camera-to-world transforms as KITTI 12-number lines."""
    with open(path, "w", encoding="ascii") as fh:
        for pose in poses:
            row = np.hstack([pose.R, pose.t[:, None]]).reshape(-1)
            fh.write(" ".join(f"{v:.12e}" for v in row) + "\n")
