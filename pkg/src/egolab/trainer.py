"""Joint self-supervised optimization of the depth and pose networks.

Every step predicts the target depth pyramid, estimates one pose per source
from (optionally obfuscated) pose-network inputs, assembles the multi-scale
objective on the clean frames, and applies one Adam update per network with
its own learning rate.  Runs are fully deterministic per seed; checkpoints
resume bitwise when training in float32 (the checkpoint payload precision).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from .augment import AugmentPolicy, apply_obfuscation, sample_mask
from .diffcore import NonFiniteError, Tensor, no_grad
from .geometry import invert_pose_tensors, pose_rt_tensors
from .losses import LossBreakdown, LossWeights, SsimParams, total_loss
from .networks import (
    DepthNetConfig,
    ParamSet,
    PoseNetConfig,
    depth_forward,
    init_params,
    normalize_depth_input,
    pose_forward,
)
from .synthdata import SequenceDataset, snippets

CHECKPOINT_MAGIC = b"EGOCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_depth: float = 1e-3
    lr_pose: float = 5e-4
    lr_halve_every: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0
    dtype: str = "float32"
    grad_clip: float = 10.0          # 0 disables clipping
    context: str = "two_source"
    depth_net: DepthNetConfig = field(default_factory=DepthNetConfig)
    pose_net: PoseNetConfig = field(default_factory=PoseNetConfig)
    automask_tiebreak: float = 1e-5  # 0 disables the tie-break noise

    def __post_init__(self):
        if self.lr_depth <= 0 or self.lr_pose <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr_halve_every < 1:
            raise ValueError("lr_halve_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


# -- config (de)serialization ------------------------------------------------


def config_to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


_NESTED = {
    "weights": LossWeights, "ssim": SsimParams, "augment": AugmentPolicy,
    "depth_net": DepthNetConfig, "pose_net": PoseNetConfig,
}
_TUPLE_FIELDS = {"input_size", "tower_channels"}


def config_from_dict(d: dict, cls=TrainConfig):
    kwargs = {}
    known = {f.name for f in fields(cls)}
    for key, value in d.items():
        if key not in known:
            raise ValueError(f"unknown config field '{key}' for {cls.__name__}")
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = config_from_dict(value, _NESTED[key])
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimizerState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()},
                   step=0)


def adam_step(params: ParamSet, grads: dict, state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in params.names():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[name].data -= lr * update


def lr_at(epoch: int, config: TrainConfig):
    """Base learning rates halved every ``lr_halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    factor = 0.5 ** (epoch // config.lr_halve_every)
    return config.lr_depth * factor, config.lr_pose * factor


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int
    config: TrainConfig
    depth_params: ParamSet
    pose_params: ParamSet
    depth_opt: OptimizerState
    pose_opt: OptimizerState
    rng_state: dict
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = []
    chunks = []
    offset = 0

    def push(name, net, kind, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "net": net, "kind": kind,
                         "shape": list(arr.shape), "offset": offset,
                         "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for net, params, opt in (("depth", ckpt.depth_params, ckpt.depth_opt),
                             ("pose", ckpt.pose_params, ckpt.pose_opt)):
        for name in params.names():
            push(name, net, "param", params[name].data)
            push(name, net, "adam_m", opt.m[name])
            push(name, net, "adam_v", opt.v[name])

    header = {
        "version": ckpt.version,
        "epoch": ckpt.epoch,
        "config": config_to_dict(ckpt.config),
        "rng_state": ckpt.rng_state,
        "adam_steps": {"depth": ckpt.depth_opt.step, "pose": ckpt.pose_opt.step},
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("ascii"))
        payload = fh.read()
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    config = config_from_dict(header["config"])

    nets = {"depth": ({}, OptimizerState({}, {}, header["adam_steps"]["depth"])),
            "pose": ({}, OptimizerState({}, {}, header["adam_steps"]["pose"]))}
    for entry in header["manifest"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["length"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        params, opt = nets[entry["net"]]
        if entry["kind"] == "param":
            params[entry["name"]] = Tensor(arr, requires_grad=True)
        elif entry["kind"] == "adam_m":
            opt.m[entry["name"]] = arr
        else:
            opt.v[entry["name"]] = arr
    return Checkpoint(
        epoch=header["epoch"], config=config,
        depth_params=ParamSet(nets["depth"][0]),
        pose_params=ParamSet(nets["pose"][0]),
        depth_opt=nets["depth"][1], pose_opt=nets["pose"][1],
        rng_state=header["rng_state"],
    )


# -- training loop ----------------------------------------------------------------


def _source_offsets(context: str):
    return (-1, 1) if context == "two_source" else (1,)


def _gather(snips, ids, dtype):
    target = np.stack([snips[i].target.image for i in ids]).astype(dtype)
    n_src = len(snips[ids[0]].sources)
    sources = [np.stack([snips[i].sources[s].image for i in ids]).astype(dtype)
               for s in range(n_src)]
    return target, sources


def _pose_net_inputs(config, rng, target_img, source_imgs, depth_t, depth_s_list):
    """Normalized (detached) depth plus optional per-frame obfuscation.

    One mask per frame, shared between that frame's RGB and depth streams,
    independent across frames and batch items.
    """
    d_t = normalize_depth_input(depth_t)
    d_s = [normalize_depth_input(d) for d in depth_s_list]
    if not (config.augment.enabled and config.augment.coverage > 0):
        return Tensor(target_img), d_t, [Tensor(s) for s in source_imgs], d_s

    batch, _, h, w = target_img.shape
    frames = [(target_img, d_t.data)] + list(zip(source_imgs, [d.data for d in d_s]))
    out = []
    for img, dep in frames:
        img_aug = np.empty_like(img)
        dep_aug = np.empty_like(dep)
        for b in range(batch):
            mask = sample_mask(config.augment, rng, h, w)
            d_in = dep[b] if config.augment.apply_to_depth else None
            rng_img, rng_dep = apply_obfuscation(img[b], d_in, mask, rng)
            img_aug[b] = rng_img
            dep_aug[b] = rng_dep if rng_dep is not None else dep[b]
        out.append((Tensor(img_aug.astype(img.dtype)),
                    Tensor(dep_aug.astype(dep.dtype))))
    (t_img, t_dep), rest = out[0], out[1:]
    return t_img, t_dep, [r[0] for r in rest], [r[1] for r in rest]


def train(config: TrainConfig, dataset: SequenceDataset, resume: Checkpoint | None = None,
          step_hook=None):
    """Run the training loop; returns (final checkpoint, per-epoch log rows).

    ``resume`` continues a run from its stored epoch, parameters, optimizer
    moments and RNG state; with float32 training the continued loss trace is
    identical to the uninterrupted one.  ``step_hook``, when given, receives
    a dict per step with the loss breakdown and the exact tensors fed to the
    loss and the pose network (instrumentation only).
    """
    dtype = np.float32 if config.dtype == "float32" else np.float64
    snips = list(snippets(dataset, context=config.context))
    if not snips:
        raise ValueError("dataset yields no snippets")
    K = dataset.intrinsics

    if resume is not None:
        depth_params = resume.depth_params
        pose_params = resume.pose_params
        depth_opt = resume.depth_opt
        pose_opt = resume.pose_opt
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        depth_params = init_params(config.depth_net, config.seed).astype(dtype)
        pose_params = init_params(config.pose_net, config.seed + 1).astype(dtype)
        depth_opt = OptimizerState.zeros_like(depth_params)
        pose_opt = OptimizerState.zeros_like(pose_params)
        rng = np.random.default_rng(config.seed)
        start_epoch = 0

    logs = []
    for epoch in range(start_epoch, config.epochs):
        lr_d, lr_p = lr_at(epoch, config)
        order = rng.permutation(len(snips))
        sums = {"total": 0.0, "photometric": 0.0, "smoothness": 0.0,
                "masked_fraction": 0.0}
        steps = 0
        for lo in range(0, len(order), config.batch_size):
            ids = order[lo:lo + config.batch_size]
            breakdown = _train_step(config, snips, ids, K, depth_params,
                                    pose_params, depth_opt, pose_opt,
                                    lr_d, lr_p, rng, dtype, epoch, steps,
                                    step_hook)
            sums["total"] += float(breakdown.total.data)
            sums["photometric"] += breakdown.photometric
            sums["smoothness"] += breakdown.smoothness
            sums["masked_fraction"] += breakdown.masked_fraction
            steps += 1
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        logs.append(row)

    ckpt = Checkpoint(epoch=config.epochs, config=config,
                      depth_params=depth_params, pose_params=pose_params,
                      depth_opt=depth_opt, pose_opt=pose_opt,
                      rng_state=rng.bit_generator.state)
    return ckpt, logs


def _train_step(config, snips, ids, K, depth_params, pose_params,
                depth_opt, pose_opt, lr_d, lr_p, rng, dtype,
                epoch, step, step_hook) -> LossBreakdown:
    target_img, source_imgs = _gather(snips, ids, dtype)
    target = Tensor(target_img)

    try:
        pyramid = depth_forward(depth_params, target, config.depth_net)
        n_src = len(source_imgs)
        batch = target_img.shape[0]
        with no_grad():
            stacked_src = depth_forward(depth_params,
                                        Tensor(np.concatenate(source_imgs, axis=0)),
                                        config.depth_net)[0]
            depth_s_list = [stacked_src[i * batch:(i + 1) * batch]
                            for i in range(n_src)]
        t_img, t_dep, s_imgs, s_deps = _pose_net_inputs(
            config, rng, target_img, source_imgs, pyramid[0], depth_s_list)

        # the pose network always sees (earlier frame, later frame); the
        # predicted transform is inverted (differentiably) for sources that
        # precede the target, so one pass covers all sources
        offsets = _source_offsets(config.context)
        first_img, first_dep, second_img, second_dep = [], [], [], []
        for i, off in enumerate(offsets):
            if off > 0:
                first_img.append(t_img.data)
                first_dep.append(t_dep.data)
                second_img.append(s_imgs[i].data)
                second_dep.append(s_deps[i].data)
            else:
                first_img.append(s_imgs[i].data)
                first_dep.append(s_deps[i].data)
                second_img.append(t_img.data)
                second_dep.append(t_dep.data)
        pose_all = pose_forward(
            pose_params,
            Tensor(np.concatenate(first_img, axis=0)),
            Tensor(np.concatenate(first_dep, axis=0)),
            Tensor(np.concatenate(second_img, axis=0)),
            Tensor(np.concatenate(second_dep, axis=0)),
            config.pose_net)
        pose_vecs = [pose_all[i * batch:(i + 1) * batch] for i in range(n_src)]
        poses = []
        for vec, off in zip(pose_vecs, offsets):
            rot, trans = pose_rt_tensors(vec, batch, vec.data.dtype)
            if off < 0:
                rot, trans = invert_pose_tensors(rot, trans)
            poses.append((rot, trans))

        tiebreak = None
        if config.automask_tiebreak > 0:
            tiebreak = [rng.uniform(0.0, config.automask_tiebreak,
                                    (target_img.shape[0], 1,
                                     target_img.shape[2], target_img.shape[3])
                                    ).astype(dtype)
                        for _ in source_imgs]

        breakdown = total_loss(target, [Tensor(s) for s in source_imgs],
                               pyramid, poses, K, config.weights, config.ssim,
                               automask_tiebreak=tiebreak)

        depth_params.zero_grad()
        pose_params.zero_grad()
        breakdown.total.backward()
    except NonFiniteError as err:
        snippet_ids = [snips[i].index for i in ids]
        raise NonFiniteError(f"{err} (epoch {epoch}, snippets {snippet_ids})") from err

    d_grads = {k: t.grad for k, t in depth_params.items() if t.grad is not None}
    p_grads = {k: t.grad for k, t in pose_params.items() if t.grad is not None}
    if config.grad_clip > 0:
        clip_gradients(d_grads, config.grad_clip)
        clip_gradients(p_grads, config.grad_clip)
    adam_step(depth_params, d_grads, depth_opt, lr_d,
              config.beta1, config.beta2, config.eps_adam)
    adam_step(pose_params, p_grads, pose_opt, lr_p,
              config.beta1, config.beta2, config.eps_adam)

    if step_hook is not None:
        step_hook({
            "epoch": epoch, "step": step,
            "snippet_ids": [snips[i].index for i in ids],
            "breakdown": breakdown,
            "loss_target": target.data, "loss_sources": source_imgs,
            "pose_inputs": {"image_t": t_img.data, "depth_t": t_dep.data,
                            "images_s": [s.data for s in s_imgs],
                            "depths_s": [d.data for d in s_deps]},
            "pose_vecs": [v.data.copy() for v in pose_vecs],
        })
    return breakdown


def predict_relative_pose(ckpt: Checkpoint, image_t, image_s):
    """Two-frame inference: (3,H,W) arrays -> 6-vector pose (warp convention)."""
    cfg = ckpt.config
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    with no_grad():
        it = Tensor(image_t[None].astype(dtype))
        is_ = Tensor(image_s[None].astype(dtype))
        d_t = depth_forward(ckpt.depth_params, it, cfg.depth_net)[0]
        d_s = depth_forward(ckpt.depth_params, is_, cfg.depth_net)[0]
        vec = pose_forward(ckpt.pose_params, it, normalize_depth_input(d_t),
                           is_, normalize_depth_input(d_s), cfg.pose_net)
    return vec.data[0].astype(np.float64)


def predict_depth(ckpt: Checkpoint, image):
    """Full-resolution depth map (H, W) for a single (3,H,W) image."""
    cfg = ckpt.config
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    with no_grad():
        d = depth_forward(ckpt.depth_params, Tensor(image[None].astype(dtype)),
                          cfg.depth_net)[0]
    return d.data[0, 0].astype(np.float64)
