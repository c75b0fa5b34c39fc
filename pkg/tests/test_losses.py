"""SSIM, photometric, auto-mask, robust min, smoothness, and the 4-scale
total objective."""

import numpy as np
import pytest

from egolab.diffcore import Tensor, check_gradient
from egolab.geometry import CameraIntrinsics, PoseVec6
from egolab.losses import (
    LossWeights,
    SsimParams,
    auto_mask,
    masked_mean,
    photometric_loss,
    robust_loss,
    smoothness_loss,
    ssim_map,
    total_loss,
)

C1 = 1e-4
C2 = 9e-4


@pytest.fixture
def cam16():
    return CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)


def textured(shape, seed=0, sharp=0.5):
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    out = np.zeros(shape)
    for b in range(n):
        for ch in range(c):
            a, bb, ph = rng.uniform(0.1, sharp, 2).tolist() + [rng.uniform(0, 6)]
            out[b, ch] = 0.5 + 0.4 * np.sin(a * us + ph) * np.cos(bb * vs - ph)
    return out


def test_default_constants():
    p = SsimParams()
    assert p.c1 == pytest.approx(1e-4)
    assert p.c2 == pytest.approx(9e-4)
    assert p.window == 3


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(c1=0.0)
    with pytest.raises(ValueError):
        SsimParams(window=4)


def test_ssim_of_identical_images_is_one():
    x = Tensor(textured((1, 3, 8, 8), seed=1))
    assert np.allclose(ssim_map(x, x).data, 1.0, atol=1e-12)


def test_ssim_constant_images_closed_form():
    x = Tensor(np.zeros((1, 1, 6, 6)))
    y = Tensor(np.ones((1, 1, 6, 6)))
    expected = C1 / (1.0 + C1)
    assert np.allclose(ssim_map(x, y).data, expected, atol=1e-15)


def test_ssim_symmetry():
    x = Tensor(textured((1, 3, 8, 8), seed=2))
    y = Tensor(textured((1, 3, 8, 8), seed=3))
    assert np.abs(ssim_map(x, y).data - ssim_map(y, x).data).max() < 1e-12


def test_ssim_range():
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((2, 3, 10, 10)))
    y = Tensor(rng.random((2, 3, 10, 10)))
    s = ssim_map(x, y).data
    assert s.min() >= -1.0 - 1e-12 and s.max() <= 1.0 + 1e-12


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim_map(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 4))))


def test_photometric_zero_for_identical():
    x = Tensor(textured((1, 3, 8, 8), seed=5))
    assert np.abs(photometric_loss(x, x).data).max() < 1e-12


def test_photometric_constant_images_closed_form():
    x = Tensor(np.zeros((1, 1, 6, 6)))
    y = Tensor(np.ones((1, 1, 6, 6)))
    ssim_val = C1 / (1.0 + C1)
    expected = 0.85 * (1.0 - ssim_val) / 2.0 + 0.15 * 1.0
    got = photometric_loss(x, y, LossWeights(alpha=0.85)).data
    assert np.allclose(got, expected, atol=1e-12)
    assert expected == pytest.approx(0.57496, abs=5e-6)


def test_photometric_alpha_zero_is_pure_l1():
    x = Tensor(textured((1, 3, 8, 8), seed=6))
    y = Tensor(textured((1, 3, 8, 8), seed=7))
    got = photometric_loss(x, y, LossWeights(alpha=0.0)).data
    l1 = np.abs(x.data - y.data).mean(axis=1, keepdims=True)
    assert np.allclose(got, l1, atol=1e-12)


def test_photometric_nonnegative():
    rng = np.random.default_rng(8)
    x = Tensor(rng.random((1, 3, 8, 8)))
    y = Tensor(rng.random((1, 3, 8, 8)))
    assert photometric_loss(x, y).data.min() >= 0.0


def test_auto_mask_static_scene_filters_pixels():
    # raw source equals the target; any imperfect warp loses the strict test
    tgt = Tensor(textured((1, 3, 8, 8), seed=9))
    src = Tensor(tgt.data.copy())
    synth = Tensor(tgt.data + 0.05)
    assert not auto_mask(tgt, src, synth).any()


def test_auto_mask_perfect_warp_strictness():
    # synth == target exactly: zero warped error never beats zero raw error
    tgt = Tensor(textured((1, 3, 8, 8), seed=10))
    synth = Tensor(tgt.data.copy())
    src_same = Tensor(tgt.data.copy())
    assert not auto_mask(tgt, src_same, synth).any()
    # where the raw source differs, the strict inequality holds and keeps
    src_diff = Tensor(np.clip(tgt.data + 0.2, 0, 1))
    assert auto_mask(tgt, src_diff, synth).all()


def test_auto_mask_keeps_moving_texture(cam16):
    """8x8-style scene where the warp explains motion better than staying put."""
    from egolab.geometry import synthesize_view

    us, vs = np.meshgrid(np.arange(16.0), np.arange(16.0))
    tex = lambda u: 0.5 + 0.4 * np.sin(0.9 * u)
    Z, tx = 5.0, 0.5
    shift = cam16.fx * tx / Z
    tgt = Tensor(tex(us + shift)[None, None])
    src = Tensor(tex(us)[None, None])
    pose = PoseVec6([tx, 0, 0], [0, 0, 0])
    synth, valid = synthesize_view(src, Tensor(np.full((1, 1, 16, 16), Z)), pose,
                                   cam16)
    mask = auto_mask(tgt, src, synth)
    interior = valid & mask
    # brute-force check per pixel on the interior
    warped_err = photometric_loss(tgt, synth).data
    raw_err = photometric_loss(tgt, src).data
    assert np.array_equal(mask, warped_err < raw_err)
    assert interior[0, 0, :, 2:-2].mean() > 0.8


def test_robust_loss_perfect_warp_is_zero(cam16):
    tgt = Tensor(textured((1, 3, 16, 16), seed=11))
    src = Tensor(tgt.data.copy())
    depth = Tensor(np.full((1, 1, 16, 16), 5.0))
    loss_map, mask = robust_loss(tgt, [src], depth, [PoseVec6.identity()], cam16)
    assert np.abs(loss_map.data).max() < 1e-12


def test_robust_loss_needs_a_source(cam16):
    tgt = Tensor(textured((1, 3, 16, 16), seed=12))
    with pytest.raises(ValueError):
        robust_loss(tgt, [], Tensor(np.full((1, 1, 16, 16), 5.0)), [], cam16)


def test_robust_min_picks_better_source_everywhere(cam16):
    from egolab.geometry import synthesize_view

    tgt_arr = textured((1, 3, 16, 16), seed=13)
    tgt = Tensor(tgt_arr)
    good = Tensor(tgt_arr.copy())           # warps perfectly under identity
    bad = Tensor(np.clip(tgt_arr + 0.3, 0, 1))
    depth = Tensor(np.full((1, 1, 16, 16), 5.0))
    poses = [PoseVec6.identity(), PoseVec6.identity()]
    loss_map, mask = robust_loss(tgt, [good, bad], depth, poses, cam16)
    per_good = photometric_loss(tgt, good).data
    per_bad = photometric_loss(tgt, bad).data
    assert np.allclose(loss_map.data, np.minimum(per_good, per_bad), atol=1e-12)
    assert loss_map.data.max() < 1e-12


def test_robust_min_bounded_by_each_source(cam16):
    rng = np.random.default_rng(14)
    tgt = Tensor(textured((1, 3, 16, 16), seed=15))
    sources = [Tensor(np.clip(textured((1, 3, 16, 16), seed=16 + i), 0, 1))
               for i in range(3)]
    depth = Tensor(np.full((1, 1, 16, 16), 5.0) + rng.random((1, 1, 16, 16)))
    poses = [PoseVec6(rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.02, 0.02, 3))
             for _ in range(3)]
    loss_map, _ = robust_loss(tgt, sources, depth, poses, cam16)
    from egolab.geometry import synthesize_view
    for src, pose in zip(sources, poses):
        synth, valid = synthesize_view(src, depth, pose, cam16)
        per = photometric_loss(tgt, synth).data
        assert (loss_map.data[valid] <= per[valid] + 1e-12).all()


def test_smoothness_constant_depth_zero():
    img = Tensor(textured((1, 3, 6, 9), seed=17))
    depth = Tensor(np.full((1, 1, 6, 9), 4.2))
    assert float(smoothness_loss(depth, img).data) == pytest.approx(0.0, abs=1e-15)


def test_smoothness_linear_ramp_closed_form():
    h, w = 5, 9
    ramp = 2.0 + 0.5 * np.arange(w)
    depth = np.broadcast_to(ramp, (h, w)).copy()[None, None]
    img = Tensor(np.full((1, 3, h, w), 0.5))
    expected = 0.5 / depth.mean()     # slope of the mean-normalized ramp
    got = float(smoothness_loss(Tensor(depth), img).data)
    assert got == pytest.approx(expected, abs=1e-12)


def test_smoothness_suppressed_under_image_edges():
    h, w = 5, 9
    ramp = np.broadcast_to(2.0 + 0.5 * np.arange(w), (h, w)).copy()[None, None]
    flat = Tensor(np.full((1, 3, h, w), 0.5))
    edgy_arr = np.full((1, 3, h, w), 0.5)
    edgy_arr[:, :, :, ::2] = 1.0      # strong horizontal gradients
    edgy = Tensor(edgy_arr)
    assert float(smoothness_loss(Tensor(ramp), edgy).data) < \
        float(smoothness_loss(Tensor(ramp), flat).data)


def test_masked_mean_ignores_masked_out_values():
    rng = np.random.default_rng(18)
    vals = rng.random((1, 1, 4, 4))
    mask = rng.random((1, 1, 4, 4)) > 0.5
    base, count = masked_mean(Tensor(vals), mask)
    poisoned = vals.copy()
    poisoned[~mask] = 1e9
    again, _ = masked_mean(Tensor(poisoned), mask)
    assert float(base.data) == pytest.approx(float(again.data))
    assert count == int(mask.sum())


def _gt_snippet(cam, seed=19):
    from egolab.synthdata import RandomHeightfield, SceneConfig, generate_sequence
    from egolab.geometry import compose, invert, pose_to_params

    scene = SceneConfig(texture_seed=seed,
                        geometry=RandomHeightfield(6.0, 0.4),
                        image_size=(cam.height, cam.width), intrinsics=cam)
    traj = [PoseVec6([-0.05, 0.02, -0.04], [0, 0.01, 0]),
            PoseVec6.identity(),
            PoseVec6([0.06, -0.02, 0.05], [0, -0.01, 0.005])]
    ds = generate_sequence(scene, traj, seed=seed)
    warps = []
    for s in (0, 2):
        rel = compose(invert(ds.poses[1]), ds.poses[s])
        warps.append(pose_to_params(invert(rel)))
    return ds, warps


def test_total_loss_ground_truth_near_zero():
    cam = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)
    ds, warps = _gt_snippet(cam)
    tgt = ds.frames[1][None]
    sources = [ds.frames[0][None], ds.frames[2][None]]
    gt_depth = Tensor(ds.depths[1][None, None])
    pyramid = [gt_depth] + [
        Tensor(ds.depths[1][::1 << k, ::1 << k][None, None].copy())
        for k in range(1, 4)]
    lb = total_loss(tgt, sources, pyramid, warps, cam,
                    LossWeights(alpha=0.85, smooth_lambda=0.0))
    assert float(lb.total.data) < 1e-3


def test_total_loss_breakdown_invariant():
    cam = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)
    ds, warps = _gt_snippet(cam, seed=20)
    tgt = ds.frames[1][None]
    sources = [ds.frames[0][None], ds.frames[2][None]]
    rng = np.random.default_rng(0)
    pyramid = [Tensor(5.0 + rng.random((1, 1, 64 >> k, 64 >> k)))
               for k in range(4)]
    w = LossWeights(alpha=0.85, smooth_lambda=0.17)
    lb = total_loss(tgt, sources, pyramid, warps, cam, w)
    assert float(lb.total.data) == pytest.approx(
        lb.photometric + w.smooth_lambda * lb.smoothness, abs=1e-9)
    assert len(lb.per_scale) == 4
    assert 0.0 <= lb.masked_fraction <= 1.0


def test_total_loss_lambda_zero_drops_smoothness_contribution():
    cam = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)
    ds, warps = _gt_snippet(cam, seed=21)
    tgt = ds.frames[1][None]
    sources = [ds.frames[0][None], ds.frames[2][None]]
    rng = np.random.default_rng(1)
    pyramid = [Tensor(5.0 + rng.random((1, 1, 64 >> k, 64 >> k)))
               for k in range(4)]
    lb = total_loss(tgt, sources, pyramid, warps, cam,
                    LossWeights(alpha=0.85, smooth_lambda=0.0))
    assert float(lb.total.data) == pytest.approx(lb.photometric, abs=1e-12)
    assert lb.smoothness > 0.0    # still reported


def test_total_loss_matches_per_scale_composition():
    """The fused batched path must equal composing robust_loss per scale."""
    from egolab.losses import _INVALID_PENALTY
    from egolab.diffcore import upsample_bilinear

    cam = CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)
    rng = np.random.default_rng(22)
    tgt = Tensor(textured((1, 3, 16, 16), seed=23))
    sources = [Tensor(np.clip(textured((1, 3, 16, 16), seed=24 + i), 0, 1))
               for i in range(2)]
    poses = [Tensor(np.concatenate([rng.uniform(-0.08, 0.08, 3),
                                    rng.uniform(-0.03, 0.03, 3)]))
             for _ in range(2)]
    pyramid = [Tensor(5.0 + rng.random((1, 1, 16 >> k, 16 >> k)))
               for k in range(4)]
    w = LossWeights(alpha=0.85, smooth_lambda=0.1)
    lb = total_loss(tgt, sources, pyramid, poses, cam, w)

    totals = []
    for level in range(4):
        d_full = upsample_bilinear(pyramid[level], (16, 16))
        loss_map, mask = robust_loss(tgt, sources, d_full, poses, cam, w)
        photo, _ = masked_mean(loss_map, mask)
        sm = smoothness_loss(d_full, tgt)
        totals.append(float(photo.data) + w.smooth_lambda * float(sm.data))
    assert float(lb.total.data) == pytest.approx(np.mean(totals), abs=1e-10)


def test_total_loss_gradient_end_to_end():
    """Finite differences through the whole multi-scale objective.

    The auto-mask is a discrete keep/drop decision per pixel, so the probe
    configuration needs a clear margin: large inter-frame motion (raw-source
    error high) with poses near ground truth (warped error low) keeps the
    mask stable under the eps-sized nudges.
    """
    from egolab.synthdata import RandomHeightfield, SceneConfig, generate_sequence
    from egolab.geometry import compose, invert, pose_to_params

    cam = CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)
    scene = SceneConfig(texture_seed=31, geometry=RandomHeightfield(6.0, 0.4),
                        image_size=(16, 16), intrinsics=cam)
    traj = [PoseVec6([-0.22, 0.08, -0.15], [0, 0.02, 0]),
            PoseVec6.identity(),
            PoseVec6([0.25, -0.1, 0.18], [0, -0.02, 0.01])]
    ds = generate_sequence(scene, traj, seed=31)
    warps = [pose_to_params(invert(compose(invert(ds.poses[1]), ds.poses[s])))
             for s in (0, 2)]
    tgt = ds.frames[1][None]
    sources = [ds.frames[0][None], ds.frames[2][None]]
    rng = np.random.default_rng(2)

    base_depth = ds.depths[1][None, None] * rng.uniform(0.98, 1.02, (1, 1, 16, 16))
    pose_arrays = [w.as_array() + rng.uniform(-0.002, 0.002, 6) for w in warps]
    coarse = [Tensor(ds.depths[1][::1 << k, ::1 << k][None, None].copy())
              for k in range(1, 4)]

    def loss_from_depth(d):
        pyramid = [d.reshape(1, 1, 16, 16)] + coarse
        lb = total_loss(tgt, sources, pyramid, [Tensor(p) for p in pose_arrays],
                        cam, LossWeights(alpha=0.85, smooth_lambda=0.05))
        return lb.total

    rep = check_gradient(loss_from_depth, Tensor(base_depth), eps=1e-6,
                         max_coords=48, rng=rng)
    assert rep.max_rel_error < 1e-3

    depth_t = Tensor(base_depth)

    def loss_from_poses(p):
        lb = total_loss(tgt, sources, [depth_t] + coarse, [p[0:6], p[6:12]],
                        cam, LossWeights(alpha=0.85, smooth_lambda=0.05))
        return lb.total

    rep = check_gradient(loss_from_poses,
                         Tensor(np.concatenate(pose_arrays)), eps=1e-8, rng=rng)
    assert rep.max_rel_error < 1e-3
