"""Scene rendering, dataset disk layout, KITTI ingestion, snippet iteration."""

import numpy as np
import pytest

from egolab.diffcore import Tensor
from egolab.geometry import (
    CameraIntrinsics,
    PoseVec6,
    compose,
    invert,
    pose_from_params,
    pose_to_params,
    synthesize_view,
)
from egolab.odomeval import write_pose_file
from egolab.synthdata import (
    FrontoPlane,
    RandomHeightfield,
    RenderError,
    SceneConfig,
    SequenceDataset,
    SlantedPlane,
    generate_sequence,
    load_dataset,
    load_kitti_sequence,
    save_dataset,
    snippets,
)

CAM = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)


def scene(geometry, seed=7, **kw):
    return SceneConfig(texture_seed=seed, geometry=geometry,
                       image_size=(64, 64), intrinsics=CAM, **kw)


def test_identity_trajectory_identical_frames():
    ds = generate_sequence(scene(FrontoPlane(8.0)), [PoseVec6.identity()] * 3, seed=0)
    assert np.array_equal(ds.frames[0], ds.frames[1])
    assert np.array_equal(ds.frames[0], ds.frames[2])


def test_fronto_plane_depth_constant():
    ds = generate_sequence(scene(FrontoPlane(10.0)), [PoseVec6.identity()], seed=0)
    assert np.allclose(ds.depths[0], 10.0, atol=1e-12)


def test_rendering_deterministic_per_seed():
    traj = [PoseVec6([0.02 * k, 0, 0], [0, 0, 0]) for k in range(3)]
    a = generate_sequence(scene(FrontoPlane(8.0)), traj, seed=5)
    b = generate_sequence(scene(FrontoPlane(8.0)), traj, seed=5)
    c = generate_sequence(scene(FrontoPlane(8.0)), traj, seed=6)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)


def test_fronto_plane_translation_shifts_by_fx_tx_over_z():
    # tx = 0.1 per frame at Z=10 with fx=50 -> 0.5 px shift per frame;
    # verified by the cross-correlation peak over 4-frame accumulation
    cam = CameraIntrinsics(fx=50.0, fy=50.0, cx=31.5, cy=31.5, width=64, height=64)
    cfg = SceneConfig(texture_seed=3, geometry=FrontoPlane(10.0),
                      image_size=(64, 64), intrinsics=cam)
    traj = [PoseVec6([0.1 * k, 0, 0], [0, 0, 0]) for k in range(5)]
    ds = generate_sequence(cfg, traj, seed=1)
    row0 = ds.frames[0][0, 32]
    row4 = ds.frames[4][0, 32]   # 4 frames * 0.5 px = 2 px expected
    shifts = np.arange(-5, 6)
    scores = [np.dot(row0[8 + s:56 + s], row4[8:56]) /
              (np.linalg.norm(row0[8 + s:56 + s]) * np.linalg.norm(row4[8:56]))
              for s in shifts]
    assert shifts[int(np.argmax(scores))] == 2


def test_slanted_plane_and_heightfield_render():
    ds = generate_sequence(scene(SlantedPlane((0.2, 0.0, 1.0), 8.0)),
                           [PoseVec6.identity()], seed=2)
    assert ds.depths[0].std() > 0.1
    ds2 = generate_sequence(scene(RandomHeightfield(8.0, 0.5)),
                            [PoseVec6.identity()], seed=2)
    assert 7.0 < ds2.depths[0].min() < ds2.depths[0].max() < 9.0


def test_camera_behind_plane_raises():
    with pytest.raises(RenderError):
        generate_sequence(scene(FrontoPlane(2.0)),
                          [PoseVec6([0, 0, 5.0], [0, 0, 0])], seed=0)


def test_gt_warp_reproduces_target_below_1e3():
    for geom in (FrontoPlane(8.0), RandomHeightfield(8.0, 0.5, smoothness=5.0)):
        traj = [PoseVec6([0.05 * k, -0.01 * k, 0.04 * k], [0, 0.004 * k, 0])
                for k in range(3)]
        ds = generate_sequence(scene(geom), traj, seed=3)
        for sn in snippets(ds):
            tgt = sn.target.image[None]
            dep = Tensor(sn.target.depth[None, None])
            for i, src in enumerate(sn.sources):
                warp = pose_to_params(invert(sn.gt_relative_poses[i]))
                out, valid = synthesize_view(Tensor(src.image[None]), dep, warp, CAM)
                mae = np.abs(out.data - tgt).mean(axis=1, keepdims=True)[valid].mean()
                assert mae < 1e-3


# -- snippets -------------------------------------------------------------------


def _tiny_dataset(n=5, with_poses=True):
    traj = [PoseVec6([0.03 * k, 0, 0.02 * k], [0, 0, 0]) for k in range(n)]
    ds = generate_sequence(scene(FrontoPlane(8.0)), traj, seed=4)
    if not with_poses:
        ds = SequenceDataset(frames=ds.frames, depths=ds.depths, poses=None,
                             intrinsics=ds.intrinsics)
    return ds


def test_two_source_snippet_centers():
    snips = list(snippets(_tiny_dataset(5), context="two_source", stride=1))
    assert [s.index for s in snips] == [1, 2, 3]
    assert all(len(s.sources) == 2 for s in snips)


def test_one_source_pairs():
    snips = list(snippets(_tiny_dataset(4), context="one_source", stride=1))
    assert [s.index for s in snips] == [0, 1, 2]
    assert all(len(s.sources) == 1 for s in snips)


def test_stride_subsamples_centers():
    snips = list(snippets(_tiny_dataset(9), context="two_source", stride=3))
    assert [s.index for s in snips] == [1, 4, 7]


def test_too_short_dataset_rejected():
    with pytest.raises(ValueError):
        list(snippets(_tiny_dataset(2), context="two_source"))


def test_identical_consecutive_poses_give_identity_relative():
    ds = generate_sequence(scene(FrontoPlane(8.0)), [PoseVec6.identity()] * 3, seed=0)
    sn = next(snippets(ds))
    for rel in sn.gt_relative_poses:
        assert np.abs(rel.matrix() - np.eye(4)).max() < 1e-12


def test_relative_pose_chain_composes():
    ds = _tiny_dataset(5)
    rel_02 = compose(invert(ds.poses[0]), ds.poses[2])
    chained = compose(compose(invert(ds.poses[0]), ds.poses[1]),
                      compose(invert(ds.poses[1]), ds.poses[2]))
    assert np.abs(rel_02.matrix() - chained.matrix()).max() < 1e-9


def test_no_poses_means_no_gt_relatives():
    sn = next(snippets(_tiny_dataset(5, with_poses=False)))
    assert sn.gt_relative_poses is None


# -- disk layout ------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    ds = _tiny_dataset(4)
    save_dataset(ds, tmp_path)
    assert (tmp_path / "frames" / "000000.png").exists()
    assert (tmp_path / "depth" / "000000.raw").exists()
    assert (tmp_path / "poses.txt").exists()
    assert (tmp_path / "intrinsics.json").exists()
    back = load_dataset(tmp_path)
    assert back.intrinsics == ds.intrinsics
    assert len(back) == len(ds)
    # 8-bit quantization on images, float32 on depth
    assert np.abs(back.frames - ds.frames).max() <= 0.5 / 255 + 1e-12
    assert np.abs(back.depths - ds.depths).max() < 1e-6
    for a, b in zip(back.poses, ds.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9
    assert back.meters_per_unit == ds.meters_per_unit


def test_pose_frame_count_mismatch_rejected(tmp_path):
    ds = _tiny_dataset(4)
    save_dataset(ds, tmp_path)
    write_pose_file(tmp_path / "poses.txt", ds.poses[:-1])
    with pytest.raises(ValueError):
        load_dataset(tmp_path)


# -- KITTI ingestion ---------------------------------------------------------------


def _write_kitti_dir(tmp_path, n_images=3, n_poses=3, width=32, height=24):
    from PIL import Image

    img_dir = tmp_path / "image_2"
    img_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n_images):
        arr = rng.integers(0, 255, (height, width, 3), dtype=np.uint8)
        Image.fromarray(arr).save(img_dir / f"{i:06d}.png")
    p2 = [50.0, 0.0, 16.0, 1.2, 0.0, 50.0, 12.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    lines = ["P0: " + " ".join("0" if j != 0 and j != 5 else "25.0"
                               for j in range(12))]
    lines[0] = "P0: 25.0 0 16.0 0 0 25.0 12.0 0 0 0 1 0"
    lines.append("P2: " + " ".join(str(v) for v in p2))
    (tmp_path / "calib.txt").write_text("\n".join(lines) + "\n")
    if n_poses:
        poses = [pose_from_params(PoseVec6([0.1 * k, 0, 0.5 * k], [0, 0, 0]))
                 for k in range(n_poses)]
        write_pose_file(tmp_path / "poses.txt", poses)


def test_kitti_sequence_loads_p2_intrinsics(tmp_path):
    _write_kitti_dir(tmp_path)
    ds = load_kitti_sequence(tmp_path)
    assert len(ds) == 3
    assert ds.intrinsics.fx == pytest.approx(50.0)
    assert ds.intrinsics.cx == pytest.approx(16.0)
    assert ds.frames.shape == (3, 3, 24, 32)
    assert ds.frames.min() >= 0.0 and ds.frames.max() <= 1.0
    assert np.allclose(ds.poses[2].t, [0.2, 0.0, 1.0])


def test_kitti_pose_count_mismatch_raises(tmp_path):
    _write_kitti_dir(tmp_path, n_images=3, n_poses=2)
    with pytest.raises(ValueError):
        load_kitti_sequence(tmp_path)


def test_kitti_identity_pose_line(tmp_path):
    _write_kitti_dir(tmp_path, n_poses=0)
    (tmp_path / "poses.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n" * 3)
    ds = load_kitti_sequence(tmp_path)
    for p in ds.poses:
        assert np.array_equal(p.matrix(), np.eye(4))


def test_kitti_translation_layout(tmp_path):
    _write_kitti_dir(tmp_path, n_poses=0)
    (tmp_path / "poses.txt").write_text(
        "1 0 0 5.5 0 1 0 0 0 0 1 2.0\n" * 3)
    ds = load_kitti_sequence(tmp_path)
    assert np.allclose(ds.poses[0].t, [5.5, 0.0, 2.0])


def test_kitti_malformed_pose_line(tmp_path):
    _write_kitti_dir(tmp_path, n_poses=0)
    (tmp_path / "poses.txt").write_text("1 0 0\n" * 3)
    with pytest.raises(ValueError):
        load_kitti_sequence(tmp_path)


def test_kitti_missing_images(tmp_path):
    (tmp_path / "image_2").mkdir()
    with pytest.raises(FileNotFoundError):
        load_kitti_sequence(tmp_path)
