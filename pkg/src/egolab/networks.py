"""Toy-scale depth network (encoder-decoder, 4-scale output) and the
two-stream RGB-D pose network.

The depth decoder carries each scale's prediction upward: the normalized
disparity predicted at a scale is x2-upsampled and concatenated into the
decoder features of the next-finer scale.  Depth is bounded through
d = 1 / (dispmin + (dispmax - dispmin) * sigmoid(logit)) with
dispmin = 1/max_depth and dispmax = 1/min_depth.

The pose network runs two separate towers, one over channel-concatenated
RGB frames and one over channel-concatenated normalized depth maps.  Each
tower is 8 conv stages (stride 2 at stages 1, 2, 4 and 6), global average
pooling, and a zero-initialized linear head to 6 values; the two 6-vectors
are fused (average by default) and the rotation part is scaled down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Tensor,
    concat,
    conv2d,
    matmul,
    maximum,
    reshape,
    sigmoid,
    upsample_bilinear,
    upsample_nearest2x,
)

_POSE_STRIDE_STAGES = (0, 1, 3, 5)
_LEAK = 0.1


def leaky_relu(x):
    """max(x, 0.1 x); the slope on the negative side keeps units recoverable."""
    return maximum(x, _LEAK * x)


@dataclass(frozen=True)
class DepthNetConfig:
    base_channels: int = 16
    encoder_depth: int = 4
    min_depth: float = 0.1
    max_depth: float = 100.0
    input_size: tuple = (64, 64)

    def __post_init__(self):
        h, w = self.input_size
        if self.encoder_depth < 4:
            raise ValueError("encoder_depth must be >= 4 for 4-scale output")
        if h % (1 << self.encoder_depth) or w % (1 << self.encoder_depth):
            raise ValueError("input size must divide by 2^encoder_depth")
        if not (0 < self.min_depth < self.max_depth):
            raise ValueError("need 0 < min_depth < max_depth")

    def encoder_channels(self):
        return [self.base_channels * (1 << min(i, 3)) for i in range(self.encoder_depth)]

    def decoder_channels(self):
        return [self.base_channels * (1 << min(level, 3)) for level in range(self.encoder_depth)]


@dataclass(frozen=True)
class PoseNetConfig:
    tower_channels: tuple = (16, 32, 32, 64, 64, 128, 128, 128)
    rotation_scale: float = 0.01
    fusion: str = "average"

    def __post_init__(self):
        if len(self.tower_channels) != 8:
            raise ValueError("each tower has exactly 8 conv stages")
        if self.fusion not in ("average", "sum"):
            raise ValueError("fusion must be 'average' or 'sum'")


class ParamSet:
    """Named map of parameter tensors plus their initialization metadata."""

    def __init__(self, params: dict, meta: dict | None = None):
        self.params = params
        self.meta = meta or {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return sorted(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def astype(self, dtype) -> "ParamSet":
        cast = {k: Tensor(v.data.astype(dtype), requires_grad=True)
                for k, v in self.params.items()}
        return ParamSet(cast, dict(self.meta))


class _Init:
    """Accumulates Kaiming / zero initialized conv and linear parameters."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict = {}
        self.meta: dict = {}

    def conv(self, name, in_ch, out_ch, k=3, zero=False):
        fan_in = in_ch * k * k
        if zero:
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(out_ch), requires_grad=True)
        self.meta[f"{name}.w"] = {"init": "zero" if zero else "kaiming", "fan_in": fan_in}
        self.meta[f"{name}.b"] = {"init": "zero"}

    def linear(self, name, in_dim, out_dim, zero=False):
        if zero:
            w = np.zeros((in_dim, out_dim))
        else:
            w = self.rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, out_dim))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(out_dim), requires_grad=True)
        self.meta[f"{name}.w"] = {"init": "zero" if zero else "kaiming", "fan_in": in_dim}
        self.meta[f"{name}.b"] = {"init": "zero"}


def init_params(config, seed: int) -> ParamSet:
    """Deterministic parameter set for a depth or pose network config."""
    rng = np.random.default_rng(seed)
    init = _Init(rng)
    if isinstance(config, DepthNetConfig):
        enc = config.encoder_channels()
        dec = config.decoder_channels()
        prev = 3
        for i, ch in enumerate(enc):
            init.conv(f"enc{i}", prev, ch)
            prev = ch
        for level in reversed(range(config.encoder_depth)):
            in_ch = enc[-1] if level == config.encoder_depth - 1 else dec[level + 1]
            if level >= 1:
                in_ch += enc[level - 1]
            if level + 1 <= 3:
                in_ch += 1  # the next-coarser scale's upsampled disparity
            init.conv(f"dec{level}", in_ch, dec[level])
            if level <= 3:
                init.conv(f"disp{level}", dec[level], 1)
    elif isinstance(config, PoseNetConfig):
        for tower, in_ch in (("rgb", 6), ("depth", 2)):
            prev = in_ch
            for j, ch in enumerate(config.tower_channels):
                init.conv(f"{tower}.conv{j}", prev, ch)
                prev = ch
            init.linear(f"{tower}.head", prev, 6, zero=True)
    else:
        raise TypeError(f"unknown config type {type(config)!r}")
    return ParamSet(init.params, init.meta)


def _conv_block(params, name, x, stride=1):
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    out = conv2d(x, w, stride=stride, padding=w.data.shape[2] // 2)
    return out + reshape(b, (1, b.data.shape[0], 1, 1))


def depth_forward(params: ParamSet, image, config: DepthNetConfig):
    """Image (N, 3, H, W) -> [depth_full, depth_1/2, depth_1/4, depth_1/8]."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    n, c, h, w = image.data.shape
    if (h, w) != tuple(config.input_size) or c != 3:
        raise ValueError("image does not match the configured input size")

    feats = []
    x = image
    for i in range(config.encoder_depth):
        x = leaky_relu(_conv_block(params, f"enc{i}", x, stride=2))
        feats.append(x)

    dispmin = 1.0 / config.max_depth
    dispmax = 1.0 / config.min_depth
    depths = [None] * 4
    disp_prev = None
    x = feats[-1]
    for level in reversed(range(config.encoder_depth)):
        target_hw = (h >> level, w >> level)
        parts = [upsample_nearest2x(x)]
        if level >= 1:
            parts.append(feats[level - 1])
        if disp_prev is not None:
            parts.append(upsample_bilinear(disp_prev, target_hw))
        x = leaky_relu(_conv_block(params, f"dec{level}", concat(parts, axis=1)))
        if level <= 3:
            disp_prev = sigmoid(_conv_block(params, f"disp{level}", x))
            depths[level] = 1.0 / (dispmin + (dispmax - dispmin) * disp_prev)
    return depths


def _tower(params, prefix, x, config: PoseNetConfig):
    for j in range(8):
        stride = 2 if j in _POSE_STRIDE_STAGES else 1
        x = leaky_relu(_conv_block(params, f"{prefix}.conv{j}", x, stride=stride))
    pooled = x.mean(axes=(2, 3))
    w = params[f"{prefix}.head.w"]
    b = params[f"{prefix}.head.b"]
    return matmul(pooled, w) + reshape(b, (1, 6))


def pose_forward(params: ParamSet, image_t, depth_t, image_s, depth_s,
                 config: PoseNetConfig):
    """Two-frame ego-motion estimate as an (N, 6) pose vector.

    The RGB tower sees (image_t, image_s) channel-concatenated; the depth
    tower sees (depth_t, depth_s).  Depth inputs are expected normalized and
    detached (see ``normalize_depth_input``).  The fused 6-vector's rotation
    part is scaled by config.rotation_scale.
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(t)
               for t in (image_t, depth_t, image_s, depth_s)]
    image_t, depth_t, image_s, depth_s = tensors
    rgb = _tower(params, "rgb", concat([image_t, image_s], axis=1), config)
    dep = _tower(params, "depth", concat([depth_t, depth_s], axis=1), config)
    fused = rgb + dep
    if config.fusion == "average":
        fused = fused * 0.5
    return concat([fused[:, 0:3], fused[:, 3:6] * config.rotation_scale], axis=1)


def normalize_depth_input(depth) -> Tensor:
    """Stop-gradient pose-net depth input: inverse depth over its per-image mean."""
    d = depth.data if isinstance(depth, Tensor) else np.asarray(depth)
    inv = 1.0 / d
    norm = inv / inv.mean(axis=(2, 3), keepdims=True)
    return Tensor(norm)
