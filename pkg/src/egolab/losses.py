"""Self-supervised objective: SSIM, photometric, auto-mask, robust min,
edge-aware smoothness, and the 4-scale total loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Tensor,
    abs_,
    box_filter,
    concat,
    exp,
    no_grad,
    reduce_min,
    reshape,
    upsample_bilinear,
)
from .geometry import CameraIntrinsics, pose_rt_tensors, synthesize_view

# keeps invalid-source pixels from winning the min; constant, so it carries
# no gradient of its own
_INVALID_PENALTY = 1e6


@dataclass(frozen=True)
class SsimParams:
    c1: float = 1e-4
    c2: float = 9e-4
    window: int = 3

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    smooth_lambda: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.smooth_lambda < 0.0:
            raise ValueError("smoothness weight must be >= 0")


@dataclass
class LossBreakdown:
    """Total objective plus its reported components.

    ``total`` stays attached to the gradient graph; the component fields are
    plain floats for logging.
    """

    total: Tensor
    photometric: float
    smoothness: float
    masked_fraction: float
    per_scale: list = field(default_factory=list)


def ssim_map(x, y, p: SsimParams = SsimParams()):
    """Per-pixel structural similarity with a uniform block filter.

    Patch statistics come from a window-sized box filter over edge-padded
    inputs, so the output has the input's shape.  Values lie in [-1, 1].
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(y, Tensor):
        y = Tensor(y)
    if x.data.shape != y.data.shape:
        raise ValueError("ssim_map operands must have equal shapes")
    # one box-filter launch for all five patch statistics
    stats = box_filter(concat([x, y, x * x, y * y, x * y], axis=0), p.window)
    n = x.data.shape[0]
    mu_x, mu_y = stats[0:n], stats[n:2 * n]
    e_xx, e_yy, e_xy = stats[2 * n:3 * n], stats[3 * n:4 * n], stats[4 * n:5 * n]
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + p.c1) * (2.0 * cov + p.c2)
    den = (mu_x * mu_x + mu_y * mu_y + p.c1) * (var_x + var_y + p.c2)
    return num / den


def photometric_loss(target, synth, w: LossWeights = LossWeights(),
                     p: SsimParams = SsimParams()):
    """Per-pixel alpha-blend of (1 - SSIM)/2 and L1, channel-averaged.

    Returns an (N, 1, H, W) map.
    """
    s = ssim_map(target, synth, p).mean(axes=1, keepdims=True)
    l1 = abs_(target - synth).mean(axes=1, keepdims=True)
    return w.alpha * 0.5 * (1.0 - s) + (1.0 - w.alpha) * l1


def auto_mask(target, source, synth, w: LossWeights = LossWeights(),
              p: SsimParams = SsimParams()) -> np.ndarray:
    """Boolean (N, 1, H, W) mask keeping pixels the warp explains better.

    A pixel survives only when the synthesized view beats the unwarped
    source strictly: L_p(target, synth) < L_p(target, source).  Stationary
    pixels, where the raw source already matches the target, fail the
    strict inequality and are filtered out.
    """
    with no_grad():
        warped = photometric_loss(target, synth, w, p).data
        raw = photometric_loss(target, source, w, p).data
    return warped < raw


def robust_loss(target, sources, depth, poses, K: CameraIntrinsics,
                w: LossWeights = LossWeights(), p: SsimParams = SsimParams(),
                automask_tiebreak=None, raw_maps=None):
    """Per-pixel min over sources of the warped photometric loss, plus the
    reduction mask.

    Each source is warped through the target depth and its pose; the
    per-pixel minimum runs over sources whose warp landed validly (invalid
    sites are pushed out of the min by a constant penalty).  The returned
    mask is (any source valid) AND (any per-source auto-mask true), the
    domain over which the loss is averaged.

    ``automask_tiebreak`` optionally supplies one (N, 1, H, W) array per
    source, added to the raw-source error before the strict comparison;
    training uses tiny positive noise here so exact warp-equals-source ties
    (an identity-initialized pose network) do not zero out the mask.
    """
    if len(sources) == 0:
        raise ValueError("robust_loss needs at least one source")
    if not isinstance(target, Tensor):
        target = Tensor(target)
    n, _, h, w_ = target.data.shape

    per_source = []
    mask_valid = np.zeros((n, 1, h, w_), dtype=bool)
    mask_keep = np.zeros((n, 1, h, w_), dtype=bool)
    for i, src in enumerate(sources):
        if not isinstance(src, Tensor):
            src = Tensor(src)
        synth, valid = synthesize_view(src, depth, poses[i], K)
        warp_map = photometric_loss(target, synth, w, p)
        if raw_maps is not None:
            raw = raw_maps[i]
        else:
            with no_grad():
                raw = photometric_loss(target, src, w, p).data
        if automask_tiebreak is not None:
            raw = raw + automask_tiebreak[i]
        mask_keep |= warp_map.data < raw
        mask_valid |= valid
        penalty = Tensor((~valid).astype(warp_map.data.dtype) * _INVALID_PENALTY)
        per_source.append(warp_map + penalty)

    stacked = concat(per_source, axis=1)
    min_map = reduce_min(stacked, axis=1, keepdims=True)
    return min_map, mask_valid & mask_keep


def smoothness_loss(depth, image):
    """Edge-aware first-difference penalty on the mean-normalized depth."""
    if not isinstance(depth, Tensor):
        depth = Tensor(depth)
    if not isinstance(image, Tensor):
        image = Tensor(image)
    d = depth / depth.mean(axes=(2, 3), keepdims=True)
    dx = abs_(d[:, :, :, 1:] - d[:, :, :, :-1])
    dy = abs_(d[:, :, 1:, :] - d[:, :, :-1, :])
    ix = abs_(image[:, :, :, 1:] - image[:, :, :, :-1]).mean(axes=1, keepdims=True)
    iy = abs_(image[:, :, 1:, :] - image[:, :, :-1, :]).mean(axes=1, keepdims=True)
    return (dx * exp(-ix)).mean() + (dy * exp(-iy)).mean()


def masked_mean(value_map, mask: np.ndarray):
    """Mean of a per-pixel map over a boolean domain; 0 on an empty domain."""
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=value_map.data.dtype)), 0
    weights = Tensor(mask.astype(value_map.data.dtype))
    return (value_map * weights).sum() / float(count), count


def total_loss(target, sources, depth_pyramid, poses, K: CameraIntrinsics,
               w: LossWeights = LossWeights(), p: SsimParams = SsimParams(),
               automask_tiebreak=None) -> LossBreakdown:
    """Multi-scale objective: masked robust photometric plus weighted
    smoothness, averaged over the 4 depth scales.

    ``depth_pyramid`` holds depths at full, 1/2, 1/4 and 1/8 resolution
    (finest first); each is upsampled to full resolution before warping, so
    photometric and smoothness terms always act at the input resolution.

    All (scale, source) warps run as one batched synthesis and one
    photometric evaluation; the result is identical to composing
    robust_loss per scale, which the tests assert.
    """
    if not isinstance(target, Tensor):
        target = Tensor(target)
    n, _, h, w_ = target.data.shape
    if len(depth_pyramid) != 4:
        raise ValueError("expected a 4-scale depth pyramid")
    for k, d in enumerate(depth_pyramid):
        dd = d.data if isinstance(d, Tensor) else np.asarray(d)
        if dd.shape[2] != h >> k or dd.shape[3] != w_ >> k:
            raise ValueError(f"pyramid level {k} has the wrong resolution")
    sources = [s if isinstance(s, Tensor) else Tensor(s) for s in sources]
    n_src = len(sources)
    if n_src == 0:
        raise ValueError("total_loss needs at least one source")

    with no_grad():
        raw_maps = [photometric_loss(target, s, w, p).data for s in sources]

    depths_full = [upsample_bilinear(depth_pyramid[level], (h, w_))
                   for level in range(4)]
    pose_rt = [pose_rt_tensors(poses[i], n, target.data.dtype)
               for i in range(n_src)]
    pose_rt = [(_tile_rows(r, n), _tile_rows(t, n)) for r, t in pose_rt]

    # stack (level, source) pairs along the batch: level-major, source-minor
    big_src = Tensor(np.concatenate([s.data for s in sources] * 4, axis=0))
    big_depth = concat([depths_full[level] for level in range(4)
                        for _ in range(n_src)], axis=0)
    big_rot = concat([pose_rt[i][0] for _ in range(4)
                      for i in range(n_src)], axis=0)
    big_trans = concat([pose_rt[i][1] for _ in range(4)
                        for i in range(n_src)], axis=0)
    big_target = Tensor(np.concatenate([target.data] * (4 * n_src), axis=0))

    synth, valid = synthesize_view(big_src, big_depth, (big_rot, big_trans), K)
    warp_map = photometric_loss(big_target, synth, w, p)   # (4*S*N, 1, H, W)

    raw = np.concatenate(raw_maps, axis=0)
    if automask_tiebreak is not None:
        raw = raw + np.concatenate(list(automask_tiebreak), axis=0)
    keep = warp_map.data < np.concatenate([raw] * 4, axis=0)

    penalty = Tensor((~valid).astype(warp_map.data.dtype) * _INVALID_PENALTY)
    grouped = reshape(warp_map + penalty, (4, n_src, n, 1, h, w_))
    min_map = reduce_min(grouped, axis=1)                   # (4, N, 1, H, W)
    group_mask = (valid.reshape(4, n_src, n, 1, h, w_).any(axis=1)
                  & keep.reshape(4, n_src, n, 1, h, w_).any(axis=1))

    total_px = n * h * w_
    per_scale_totals = []
    photo_vals, smooth_vals, frac_vals = [], [], []
    scale_total = None
    for level in range(4):
        photo, count = masked_mean(min_map[level], group_mask[level])
        smooth = smoothness_loss(depths_full[level], target)
        level_total = photo + w.smooth_lambda * smooth
        scale_total = level_total if scale_total is None else scale_total + level_total
        per_scale_totals.append(float(level_total.data))
        photo_vals.append(float(photo.data))
        smooth_vals.append(float(smooth.data))
        frac_vals.append(count / total_px)

    total = scale_total * 0.25
    return LossBreakdown(
        total=total,
        photometric=float(np.mean(photo_vals)),
        smoothness=float(np.mean(smooth_vals)),
        masked_fraction=float(np.mean(frac_vals)),
        per_scale=per_scale_totals,
    )


def _tile_rows(t: Tensor, batch: int) -> Tensor:
    """Repeat a leading-1 tensor along the batch axis when needed."""
    if t.data.shape[0] == batch:
        return t
    if t.data.shape[0] == 1:
        return concat([t] * batch, axis=0)
    raise ValueError("pose batch does not match the image batch")
