"""Sparsity-inducing augmentation: random square noise patches obfuscating
fractions of the pose-network inputs.

Obfuscation is applied only to what the pose network sees; the images the
photometric loss consumes are never touched.  One frame's RGB and depth
streams share the same mask; masks are sampled independently across frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    coverage: float = 0.0
    patch_side: int = 8
    apply_to_depth: bool = True
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 <= self.coverage <= 0.95):
            raise ValueError("coverage must be in [0, 0.95]")
        if self.patch_side < 1:
            raise ValueError("patch_side must be >= 1")


@dataclass
class ObfuscationMask:
    mask: np.ndarray
    achieved_coverage: float


def sample_mask(policy: AugmentPolicy, rng: np.random.Generator,
                height: int, width: int) -> ObfuscationMask:
    """Union of random square patches, grown until it first reaches the
    coverage target.

    Patch top-left corners are uniform over the image and patches clip at
    the borders, so the achieved coverage overshoots the target by at most
    patch_side^2 / (H * W).
    """
    if policy.patch_side > min(height, width):
        raise ValueError("patch_side exceeds the image extent")
    mask = np.zeros((height, width), dtype=bool)
    total = height * width
    count = 0
    side = policy.patch_side
    max_draws = 100 * total
    draws = 0
    while count < policy.coverage * total:
        y = int(rng.integers(0, height))
        x = int(rng.integers(0, width))
        patch = mask[y:y + side, x:x + side]
        count += int(patch.size) - int(patch.sum())
        patch[:] = True
        draws += 1
        if draws > max_draws:
            raise RuntimeError("mask sampling failed to reach coverage")
    return ObfuscationMask(mask=mask, achieved_coverage=count / total)


def apply_obfuscation(image: np.ndarray, depth: np.ndarray | None,
                      mask: ObfuscationMask, rng: np.random.Generator,
                      depth_range: tuple | None = None):
    """Replace masked pixels with noise; unmasked pixels stay bit-identical.

    RGB channels get i.i.d. uniform [0, 1) noise.  Depth, when given, gets
    i.i.d. uniform noise over ``depth_range`` (defaulting to the input
    map's own [min, max]).  Returns copies; inputs are never mutated.
    """
    m = mask.mask
    out_image = np.array(image, copy=True)
    k = int(m.sum())
    if k:
        out_image[..., m] = rng.random((image.shape[0], k)) if image.ndim == 3 \
            else rng.random(k)
    if depth is None:
        return out_image, None
    out_depth = np.array(depth, copy=True)
    if k:
        lo, hi = depth_range if depth_range is not None else (depth.min(), depth.max())
        out_depth[..., m] = rng.uniform(lo, hi, k)
    return out_image, out_depth
