import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest

from objnerf.datamodel import (
    MANIFEST,
    CameraIntrinsics,
    Frame,
    ObjectSpec,
    Pose,
    Rng,
    SceneDataset,
    load_dataset,
    pose_apply,
    pose_compose,
    pose_inverse,
    quat_from_axis_angle,
    read_dpt,
    save_dataset,
    write_dpt,
)
from objnerf.errors import DatasetError


def _random_pose(rng: Rng) -> Pose:
    axis = rng.unit_vectors(1)[0]
    return Pose(quat_from_axis_angle(axis, float(rng.uniform(None, -3.0, 3.0))), rng.normal(3))


def _tiny_dataset(n_frames: int = 2) -> SceneDataset:
    rng = Rng(3)
    intrinsics = CameraIntrinsics(8, 6, 10.0, 10.0, 4.0, 3.0)
    frames = []
    for _ in range(n_frames):
        mask = np.zeros((6, 8), dtype=np.uint8)
        mask[2:4, 3:6] = 1
        frames.append(
            Frame(
                rgb=(rng.integers(0, 256, (6, 8, 3)) / 255.0).astype(np.float32),
                depth=rng.uniform((6, 8), 0.1, 2.0).astype(np.float32),
                mask=mask,
                pose=_random_pose(rng),
            )
        )
    objects = [ObjectSpec(1, "box", np.array([-0.1, -0.1, 0.0]), np.array([0.1, 0.1, 0.2]))]
    return SceneDataset(intrinsics, frames, objects)


def test_pose_group_axioms() -> None:
    rng = Rng(0)
    x = _random_pose(rng)
    y = _random_pose(rng)
    p = rng.normal(3)
    assert pose_compose(Pose.identity(), x).allclose(x)
    np.testing.assert_allclose(pose_apply(pose_inverse(x), pose_apply(x, p)), p, atol=1e-12)
    np.testing.assert_allclose(
        pose_apply(pose_compose(x, y), p), pose_apply(x, pose_apply(y, p)), atol=1e-12
    )


def test_pose_rotation_about_z() -> None:
    pose = Pose(quat_from_axis_angle([0.0, 0.0, 1.0], math.pi / 2), np.zeros(3))
    np.testing.assert_allclose(pose_apply(pose, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_pose_matrix_round_trip() -> None:
    pose = _random_pose(Rng(7))
    assert Pose.from_matrix(pose.matrix()).allclose(pose)
    r = pose.rotation_matrix()
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)


def test_quaternion_stays_normalized() -> None:
    rng = Rng(1)
    pose = Pose.identity()
    for _ in range(10_000):
        pose = pose_compose(pose, _random_pose(rng))
    assert abs(np.linalg.norm(pose.rotation) - 1.0) < 1e-9


def test_rng_determinism_and_streams() -> None:
    a = Rng(42).uniform(1000)
    b = Rng(42).uniform(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(Rng(42).fork("mask").uniform(10), Rng(42).fork("pose").uniform(10))
    # Draws on one stream do not shift another.
    rng = Rng(42)
    rng.fork("train").uniform(5)
    assert np.array_equal(rng.fork("mask").uniform(10), Rng(42).fork("mask").uniform(10))
    assert np.all(np.isclose(np.linalg.norm(Rng(5).unit_vectors(100), axis=1), 1.0))


def test_rng_long_streams() -> None:
    n = 10**6
    a = Rng(2024).fork("train")
    b = Rng(2024).fork("train")
    assert np.array_equal(a.uniform(n), b.uniform(n))
    assert np.array_equal(a.normal(n), b.normal(n))
    assert np.array_equal(a.integers(0, 1000, n), b.integers(0, 1000, n))

    parent = Rng(2024)
    forks = [parent.fork(name).uniform(n) for name in ("mask", "pose", "train")]
    forks.append(parent.fork(7).uniform(n))
    forks.append(Rng(2025).fork("mask").uniform(n))
    # The parent stream is untouched by forking.
    assert np.array_equal(parent.uniform(n), Rng(2024).uniform(n))
    for x in forks:
        assert abs(float(x.mean()) - 0.5) < 0.005
    for i in range(len(forks)):
        for j in range(i + 1, len(forks)):
            assert abs(float(np.corrcoef(forks[i], forks[j])[0, 1])) < 0.005, (i, j)


def test_dpt_bytes(tmp_path: Path) -> None:
    depth = np.zeros((2, 3), dtype=np.float32)
    depth[0, 0] = 1.25
    write_dpt(tmp_path / "d.dpt", depth)
    data = (tmp_path / "d.dpt").read_bytes()
    assert data[:4] == b"DPT1"
    assert struct.unpack("<II", data[4:12]) == (3, 2)
    assert data[12:16] == struct.pack("<f", 1.25)
    assert np.array_equal(read_dpt(tmp_path / "d.dpt"), depth)


def test_dataset_round_trip(tmp_path: Path) -> None:
    ds = _tiny_dataset()
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.intrinsics == ds.intrinsics
    assert len(loaded.frames) == 2
    for a, b in zip(ds.frames, loaded.frames):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.mask, b.mask)
        assert a.pose.allclose(b.pose)
    assert loaded.objects[0].name == "box"
    np.testing.assert_array_equal(loaded.objects[0].aabb_max, ds.objects[0].aabb_max)


def test_dataset_errors(tmp_path: Path) -> None:
    with pytest.raises(DatasetError, match="manifest not found"):
        load_dataset(tmp_path / "missing")

    save_dataset(_tiny_dataset(), tmp_path)
    (tmp_path / "depth" / "0001.dpt").unlink()
    with pytest.raises(DatasetError, match="file not found"):
        load_dataset(tmp_path)

    ds = _tiny_dataset(1)
    frame = ds.frames[0]
    bad_mask = frame.mask.copy()
    bad_mask[0, 0] = 9
    with pytest.raises(DatasetError, match="undeclared instance id"):
        SceneDataset(ds.intrinsics, [Frame(frame.rgb, frame.depth, bad_mask, frame.pose)], ds.objects)
    with pytest.raises(DatasetError, match="inconsistent raster size"):
        SceneDataset(
            ds.intrinsics,
            [Frame(frame.rgb, frame.depth[:, :4], frame.mask, frame.pose)],
            ds.objects,
        )


def test_empty_objects_manifest(tmp_path: Path) -> None:
    ds = _tiny_dataset(1)
    frame = ds.frames[0]
    empty = SceneDataset(
        ds.intrinsics, [Frame(frame.rgb, frame.depth, np.zeros_like(frame.mask), frame.pose)]
    )
    save_dataset(empty, tmp_path)
    with open(tmp_path / MANIFEST) as f:
        manifest = json.load(f)
    assert manifest["objects"] == []
    assert len(manifest["frames"][0]["camera_to_world"]) == 16
