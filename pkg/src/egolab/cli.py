"""Command-line surface: dataset generation, training, evaluation, and
augmentation ablation sweeps.

One JSON config file drives all commands, with per-command sections
("scene", "trajectory", "train", "eval", "ablate").  Every run writes a
manifest.json capturing the resolved config, seed, artifacts and timing, so
a run is reproducible from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diffcore import Tensor
from .geometry import CameraIntrinsics, PoseVec6, pose_from_params
from .odomeval import (
    MetricsReport,
    Trajectory,
    ate_snippets,
    depth_metrics,
    global_scale_align,
    read_pose_file,
    rel_drift,
    snippet_scale_align,
    stack_trajectory,
)
from .synthdata import (
    FrontoPlane,
    RandomHeightfield,
    SceneConfig,
    SequenceDataset,
    SlantedPlane,
    generate_sequence,
    load_dataset,
    save_dataset,
    snippets,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    predict_depth,
    predict_relative_pose,
    save_checkpoint,
    train,
)
from .geometry import invert, pose_to_params


class CliError(Exception):
    """User-facing failure with a message and exit code 2."""


def worker_count() -> int:
    value = os.environ.get("EGOLAB_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise CliError(f"EGOLAB_THREADS must be an integer, got {value!r}")


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise CliError(f"cannot read config {path}: {err}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(f"{path}:{err.lineno}:{err.colno}: invalid JSON: {err.msg}")


def _build_id() -> dict:
    info = {"package_version": __version__}
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0:
            info["git"] = rev.stdout.strip()
    except Exception:
        pass
    return info


def _write_manifest(out_dir, command, config, seed, artifacts, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "wall_clock_sec": round(time.monotonic() - started, 3),
        "build": _build_id(),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# -- scene / trajectory construction ---------------------------------------------


_GEOMETRIES = {
    "fronto_plane": FrontoPlane,
    "slanted_plane": SlantedPlane,
    "random_heightfield": RandomHeightfield,
}


def scene_from_dict(d: dict) -> SceneConfig:
    geom_spec = dict(d["geometry"])
    kind = geom_spec.pop("kind")
    if kind not in _GEOMETRIES:
        raise CliError(f"unknown geometry kind {kind!r}")
    if kind == "slanted_plane":
        geom_spec["normal"] = tuple(geom_spec["normal"])
    geometry = _GEOMETRIES[kind](**geom_spec)
    intr = d["intrinsics"]
    intrinsics = CameraIntrinsics(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"],
                                  cy=intr["cy"], width=intr["width"],
                                  height=intr["height"])
    return SceneConfig(
        texture_seed=int(d.get("texture_seed", 0)),
        geometry=geometry,
        image_size=(intrinsics.height, intrinsics.width),
        intrinsics=intrinsics,
        texture_waves=int(d.get("texture_waves", 8)),
        texture_freq=tuple(d.get("texture_freq", (0.1, 0.7))),
    )


def wander_trajectory(frames: int, seed: int, step: float = 0.15,
                      depth_margin: float = 1.0, yaw_scale: float = 0.012,
                      orbit_period: int = 80):
    """Bounded looping walk in front of the scene.

    The heading advances steadily (one loop per ``orbit_period`` frames)
    plus noise, so motion direction sweeps the full circle while segment
    displacement stays comparable to path length over sub-loop spans; steps
    keep a constant length and bounce off a bounding box.
    """
    rng = np.random.default_rng(seed)
    heading = rng.uniform(0, 2 * np.pi)
    pos = np.zeros(3)
    yaw = 0.0
    poses = []
    box = np.array([2.0, 0.8, depth_margin])
    for _ in range(frames):
        poses.append(PoseVec6(pos.copy(), [0.0, yaw, 0.0]))
        heading += 2 * np.pi / orbit_period + rng.uniform(-0.15, 0.15)
        d = np.array([np.cos(heading), 0.35 * np.sin(0.7 * heading),
                      0.6 * np.sin(heading)])
        d /= np.linalg.norm(d)
        flip = np.abs(pos + step * d) > box
        d[flip] *= -1.0
        pos = pos + step * d
        yaw = 0.93 * yaw + rng.uniform(-yaw_scale, yaw_scale)
    return poses


def trajectory_from_dict(d: dict, seed: int):
    kind = d.get("kind", "wander")
    frames = int(d["frames"])
    if kind == "wander":
        return wander_trajectory(frames, seed=int(d.get("seed", seed)),
                                 step=float(d.get("step", 0.15)),
                                 depth_margin=float(d.get("depth_margin", 1.0)),
                                 yaw_scale=float(d.get("yaw_scale", 0.012)))
    if kind == "line":
        step = np.asarray(d.get("step_vector", [0.0, 0.0, 0.1]), dtype=np.float64)
        return [PoseVec6(step * k, [0.0, 0.0, 0.0]) for k in range(frames)]
    raise CliError(f"unknown trajectory kind {kind!r}")


# -- commands ---------------------------------------------------------------------


def gt_warp_residual(ds: SequenceDataset, max_snippets: int = 8) -> float:
    """Mean absolute error of GT-depth/GT-pose view synthesis on the dataset."""
    from .geometry import synthesize_view

    errs = []
    stride = max(1, (len(ds) - 2) // max_snippets)
    for sn in snippets(ds, context="two_source", stride=stride):
        tgt = sn.target.image[None]
        dep = Tensor(sn.target.depth[None, None])
        for i, src in enumerate(sn.sources):
            warp = pose_to_params(invert(sn.gt_relative_poses[i]))
            out, valid = synthesize_view(Tensor(src.image[None]), dep, warp,
                                         sn.intrinsics)
            err = np.abs(out.data - tgt).mean(axis=1, keepdims=True)[valid]
            if err.size:
                errs.append(float(err.mean()))
    return float(np.mean(errs))


def cmd_synth(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    section = config.get("synth", config)
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    scene = scene_from_dict(section["scene"])
    trajectory = trajectory_from_dict(section["trajectory"], seed)
    ds = generate_sequence(scene, trajectory, seed=seed,
                           meters_per_unit=float(section.get("meters_per_unit", 1.0)))
    residual = gt_warp_residual(ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _write_manifest(out, "synth", section, seed,
                    {"dataset": out, "gt_warp_residual": f"{residual:.3e}"},
                    started)
    print(f"wrote {len(ds)} frames to {out} (gt-warp residual {residual:.3e})")
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    section = dict(config.get("train", config))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        train_cfg = config_from_dict(section)
    except (TypeError, ValueError) as err:
        raise CliError(f"{args.config}: bad train config: {err}")
    ds = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, logs = train(train_cfg, ds, resume=resume)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    log_path = out / "loss_curve.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "total", "photometric",
                                                "smoothness", "masked_fraction"])
        writer.writeheader()
        writer.writerows(logs)
    _write_manifest(out, "train", config_to_dict(train_cfg), train_cfg.seed,
                    {"checkpoint": ckpt_path, "loss_curve": log_path}, started)
    final = logs[-1]["total"] if logs else float("nan")
    print(f"trained {train_cfg.epochs} epochs; final loss {final:.6f}; "
          f"checkpoint at {ckpt_path}")
    return 0


def predicted_trajectory(ckpt: Checkpoint, ds: SequenceDataset) -> Trajectory:
    relatives = []
    for t in range(len(ds) - 1):
        vec = predict_relative_pose(ckpt, ds.frames[t], ds.frames[t + 1])
        relatives.append(pose_from_params(PoseVec6(vec[:3], vec[3:])))
    return stack_trajectory(relatives)


def _trajectory_svg(path, pred: Trajectory, gt: Trajectory) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    g = gt.positions()
    p = pred.positions()
    ax.plot(g[:, 0], g[:, 2], label="ground truth", color="black")
    ax.plot(p[:, 0], p[:, 2], label="prediction", color="tab:red")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(args) -> int:
    started = time.monotonic()
    ds = load_dataset(args.data)
    if ds.poses is None:
        raise CliError(f"{args.data}: dataset has no ground-truth poses")
    gt = Trajectory(list(ds.poses)).re_origined()

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        pred = predicted_trajectory(ckpt, ds)
    else:
        poses = read_pose_file(args.posefile)
        if len(poses) != len(ds):
            raise CliError(f"pose file has {len(poses)} poses for {len(ds)} frames")
        pred = Trajectory(poses).re_origined()
        ckpt = None

    if args.align == "snippet":
        aligned, _, _ = snippet_scale_align(pred, gt, window=args.snippet_len)
    else:
        aligned, _ = global_scale_align(pred, gt)

    ate = ate_snippets(pred, gt, snippet_len=args.snippet_len)
    drift = rel_drift(aligned, gt, step=args.drift_step,
                      meters_per_unit=ds.meters_per_unit)
    report = MetricsReport(ate_mean=ate.mean, ate_std=ate.std,
                           t_rel=drift.t_rel, r_rel=drift.r_rel,
                           per_length=drift.per_length)
    if ckpt is not None and ds.depths is not None:
        preds = np.stack([predict_depth(ckpt, f) for f in ds.frames])
        report.depth = depth_metrics(preds, ds.depths,
                                     ckpt.config.depth_net.min_depth,
                                     ckpt.config.depth_net.max_depth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    with open(out / "per_length.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length_m", "t_rel_percent", "r_rel_deg_per_100m", "count"])
        for length, row in sorted(drift.per_length.items()):
            writer.writerow([length, row["t_rel"], row["r_rel"], row["count"]])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z"])
        for i, (pp, gp) in enumerate(zip(aligned.positions(), gt.positions())):
            writer.writerow([i, *pp, *gp])
    _trajectory_svg(out / "trajectory.svg", aligned, gt)
    _write_manifest(out, "eval",
                    {"align": args.align, "snippet_len": args.snippet_len,
                     "drift_step": args.drift_step,
                     "source": args.checkpoint or args.posefile},
                    0, {"metrics": out / "metrics.json"}, started)
    if not all(np.isfinite(v) for v in (report.ate_mean, report.ate_std)):
        print("warning: degenerate ATE (zero-motion prediction)", file=sys.stderr)
    print(report.to_json())
    return 0


def _ablate_cell(payload):
    """One (coverage, patch) training + train/test drift evaluation."""
    (train_dir, heldout_dir, cfg_dict, coverage, patch, snippet_limit,
     drift_step) = payload
    cfg_dict = json.loads(json.dumps(cfg_dict))
    cfg_dict["augment"] = {"coverage": coverage, "patch_side": patch,
                           "apply_to_depth": True, "enabled": coverage > 0}
    cfg = config_from_dict(cfg_dict)
    train_ds = load_dataset(train_dir)
    if snippet_limit:
        limit = min(len(train_ds), snippet_limit + 2)
        train_ds = SequenceDataset(frames=train_ds.frames[:limit],
                                   depths=None if train_ds.depths is None
                                   else train_ds.depths[:limit],
                                   poses=None if train_ds.poses is None
                                   else train_ds.poses[:limit],
                                   intrinsics=train_ds.intrinsics,
                                   meters_per_unit=train_ds.meters_per_unit)
    ckpt, _ = train(cfg, train_ds)

    row = {"coverage": coverage, "patch_side": patch}
    for split, ds in (("train", train_ds), ("test", load_dataset(heldout_dir))):
        gt = Trajectory(list(ds.poses)).re_origined()
        pred = predicted_trajectory(ckpt, ds)
        aligned, _, _ = snippet_scale_align(pred, gt, window=5)
        drift = rel_drift(aligned, gt, step=drift_step,
                          meters_per_unit=ds.meters_per_unit)
        row[f"{split}_t_rel"] = drift.t_rel
        row[f"{split}_r_rel"] = drift.r_rel
    return row


def _ablation_svg(path, rows) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    patches = sorted({r["patch_side"] for r in rows})
    for metric, ax in zip(("t_rel", "r_rel"), axes):
        for patch in patches:
            sel = sorted((r for r in rows if r["patch_side"] == patch),
                         key=lambda r: r["coverage"])
            cov = [r["coverage"] for r in sel]
            ax.plot(cov, [r[f"train_{metric}"] for r in sel], "--o",
                    label=f"train p={patch}")
            ax.plot(cov, [r[f"test_{metric}"] for r in sel], "-s",
                    label=f"test p={patch}")
        ax.set_xlabel("noise coverage")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_ablate(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    section = dict(config.get("ablate", {}))
    train_section = dict(config.get("train", {}))
    if args.seed is not None:
        train_section["seed"] = args.seed
    coverages = [float(c) for c in (args.coverage.split(",") if args.coverage
                 else section.get("coverages", [0.0, 0.2, 0.4]))]
    patches = [int(p) for p in (args.patch.split(",") if args.patch
               else section.get("patch_sides", [8]))]
    snippet_limit = int(section.get("snippet_limit", 0))
    drift_step = int(section.get("drift_step", 2))

    cells = [(args.data, args.heldout, train_section, c, p, snippet_limit,
              drift_step) for c in coverages for p in patches]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_cell, cells))
    else:
        rows = [_ablate_cell(cell) for cell in cells]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["coverage", "patch_side",
                                                "train_t_rel", "train_r_rel",
                                                "test_t_rel", "test_r_rel"])
        writer.writeheader()
        writer.writerows(rows)
    _ablation_svg(out / "sweep.svg", rows)
    _write_manifest(out, "ablate",
                    {"train": train_section, "coverages": coverages,
                     "patch_sides": patches, "snippet_limit": snippet_limit},
                    train_section.get("seed", 0),
                    {"sweep": sweep_path}, started)
    for row in rows:
        print(json.dumps(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egolab",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train depth and pose networks")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or pose file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--posefile")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--align", choices=("snippet", "global"), default="snippet")
    p.add_argument("--snippet-len", type=int, choices=(3, 5), default=5,
                   dest="snippet_len")
    p.add_argument("--drift-step", type=int, default=10, dest="drift_step")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="augmentation coverage/patch sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--coverage", default=None,
                   help="comma-separated coverages, e.g. 0,0.2,0.4")
    p.add_argument("--patch", default=None,
                   help="comma-separated patch sides, e.g. 9,17")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
