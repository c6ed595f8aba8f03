import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from objnerf.datamodel import CameraIntrinsics, Rng
from objnerf.errors import SceneError
from objnerf.scenes import (
    BUILTIN_OBJECTS,
    four_object_scene,
    occluded_ball_scene,
    resolve_scene,
    single_object_scene,
)
from objnerf.synthscene import (
    Albedo,
    Box,
    Primitive,
    SceneDescription,
    Sphere,
    TrajectorySpec,
    load_scene_file,
    look_at,
    make_dataset,
    object_specs,
    render_ground_truth,
    sample_trajectory,
    save_scene,
    scene_from_json,
    scene_to_json,
)

SCENE_DIR = Path(__file__).parent.parent.parent / "configs" / "scenes"

RED = Albedo((1.0, 0.0, 0.0))


def _far_sphere() -> Primitive:
    return Primitive(Sphere(np.array([5.0, 5.0, 0.05]), 0.05), RED, 1, "far")


def _pixel_directions(intrinsics: CameraIntrinsics) -> np.ndarray:
    vs, us = np.meshgrid(
        np.arange(intrinsics.height) + 0.5, np.arange(intrinsics.width) + 0.5, indexing="ij"
    )
    d = np.stack(
        [
            (us - intrinsics.cx) / intrinsics.fx,
            (vs - intrinsics.cy) / intrinsics.fy,
            np.ones_like(us),
        ],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)  # type: ignore


def test_hemisphere_trajectory() -> None:
    center = (0.1, -0.2, 0.05)
    single = sample_trajectory(TrajectorySpec("hemisphere", 0.6, center, 1), Rng(0))
    assert len(single) == 1

    poses = sample_trajectory(TrajectorySpec("hemisphere", 0.6, center, 100), Rng(0))
    assert len(poses) == 100
    for pose in poses:
        offset = np.asarray(center) - pose.translation
        assert abs(np.linalg.norm(offset) - 0.6) < 1e-9
        assert pose.translation[2] > center[2]
        axis = pose.rotation_matrix()[:, 2]
        np.testing.assert_allclose(axis, offset / np.linalg.norm(offset), atol=1e-9)


def test_arc_trajectory_constant_height() -> None:
    spec = TrajectorySpec("arc", 1.1, (0.0, 0.0, 0.0), 20, elevation_range=0.0)
    heights = [p.translation[2] for p in sample_trajectory(spec, Rng(4))]
    np.testing.assert_allclose(heights, heights[0], atol=1e-12)
    assert abs(heights[0] - 1.1 * math.sin(spec.elevation)) < 1e-9


def test_render_table_from_above() -> None:
    intrinsics = CameraIntrinsics(11, 11, 10.0, 10.0, 5.5, 5.5)
    scene = SceneDescription(primitives=[_far_sphere()])
    frame = render_ground_truth(scene, intrinsics, look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]))
    assert abs(frame.depth[5, 5] - 1.0) < 1e-6
    assert frame.mask[5, 5] == 0
    assert np.all(frame.depth > 0)


def test_render_miss_is_background() -> None:
    intrinsics = CameraIntrinsics(11, 11, 10.0, 10.0, 5.5, 5.5)
    scene = SceneDescription(primitives=[_far_sphere()], background=(0.2, 0.4, 0.6))
    frame = render_ground_truth(scene, intrinsics, look_at([0.0, 0.0, 1.0], [0.0, 0.0, 2.0]))
    assert np.all(frame.depth == 0)
    assert np.all(frame.mask == 0)
    np.testing.assert_allclose(frame.rgb[3, 7], [0.2, 0.4, 0.6], atol=0.5 / 255)


def test_render_sphere_depth() -> None:
    intrinsics = CameraIntrinsics(11, 11, 10.0, 10.0, 5.5, 5.5)
    scene = SceneDescription(
        primitives=[Primitive(Sphere(np.array([0.0, 0.0, 0.3]), 0.1), RED, 1, "ball")],
        table_height=None,
    )
    frame = render_ground_truth(scene, intrinsics, look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]))
    assert abs(frame.depth[5, 5] - 0.6) < 1e-6
    assert frame.mask[5, 5] == 1
    assert frame.mask[0, 0] == 0 and frame.depth[0, 0] == 0


def test_looseness() -> None:
    scene = SceneDescription(primitives=[Primitive(Box(np.zeros(3), np.ones(3)), RED, 1, "box")])
    (spec,) = object_specs(scene, 1.25)
    np.testing.assert_allclose(spec.aabb_max - spec.aabb_min, [1.25, 1.25, 1.25])
    np.testing.assert_allclose(spec.center, [0.5, 0.5, 0.5])


def test_make_dataset() -> None:
    scene = single_object_scene("ball")
    intrinsics = CameraIntrinsics.from_fov(32, 24, 40.0)
    spec = TrajectorySpec("hemisphere", 0.6, tuple(scene.center()), 30)  # type: ignore
    ds = make_dataset(scene, intrinsics, spec, Rng(0))
    assert len(ds.frames) == 30
    assert len(ds.objects) == 1
    assert ds.frames[0].width == 32

    again = make_dataset(scene, intrinsics, spec, Rng(0))
    for a, b in zip(ds.frames, again.frames):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.mask, b.mask)

    for frame in ds.frames:
        assert np.all((frame.depth == 0) | (frame.depth >= 0.01))


def test_mask_pixels_unproject_into_box() -> None:
    scene = four_object_scene()
    intrinsics = CameraIntrinsics.from_fov(48, 36, 50.0)
    spec = TrajectorySpec("hemisphere", 0.8, tuple(scene.center()), 2)  # type: ignore
    ds = make_dataset(scene, intrinsics, spec, Rng(2))
    directions = _pixel_directions(intrinsics)
    for frame in ds.frames:
        world = directions @ frame.pose.rotation_matrix().T
        points = frame.pose.translation + frame.depth[..., None] * world
        for obj in ds.objects:
            selected = points[frame.mask == obj.id]
            assert np.all(selected >= obj.aabb_min - 1e-4)
            assert np.all(selected <= obj.aabb_max + 1e-4)


def test_builtin_scenes() -> None:
    scene = four_object_scene()
    assert scene.object_ids() == [1, 2, 3, 4]
    assert [scene.object_name(i) for i in scene.object_ids()] == list(BUILTIN_OBJECTS)
    for name in BUILTIN_OBJECTS:
        single = single_object_scene(name)
        assert single.object_ids() == [1]
        lo, hi = single.tight_bounds(1)
        assert np.all(hi - lo > 0.03) and np.all(hi - lo < 0.3)


def test_scene_json_round_trip() -> None:
    scene = four_object_scene()
    encoded = scene_to_json(scene)
    assert scene_to_json(scene_from_json(encoded)) == encoded


def test_builtin_occlusion_scene() -> None:
    scene = resolve_scene("occluded_ball").scene
    assert scene.object_ids() == [1, 2]
    assert [scene.object_name(i) for i in scene.object_ids()] == ["ball", "post"]
    assert scene_to_json(scene) == scene_to_json(occluded_ball_scene())
    assert resolve_scene("cup").scene.object_ids() == [1]


def test_scene_file_blocks(tmp_path: Path) -> None:
    setup = load_scene_file(SCENE_DIR / "desk_clutter.json")
    assert [setup.scene.object_name(i) for i in setup.scene.object_ids()] == ["mug", "box", "ball"]
    assert setup.trajectory["trajectory"] == "arc"
    assert setup.trajectory["n_views"] == 40
    assert setup.intrinsics == CameraIntrinsics(160, 120, 200.0, 200.0, 80.0, 60.0)

    save_scene(setup.scene, tmp_path / "scene.json", setup.trajectory, setup.intrinsics)
    again = resolve_scene(str(tmp_path / "scene.json"))
    assert again.trajectory == setup.trajectory
    assert again.intrinsics == setup.intrinsics
    assert scene_to_json(again.scene) == scene_to_json(setup.scene)

    save_scene(setup.scene, tmp_path / "bare.json")
    bare = load_scene_file(tmp_path / "bare.json")
    assert bare.trajectory == {} and bare.intrinsics is None


def test_scene_file_errors(tmp_path: Path) -> None:
    encoded = scene_to_json(single_object_scene("ball"))
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({**encoded, "trajectory": {"speed": 2.0}}))
    with pytest.raises(SceneError, match="Unknown trajectory keys"):
        load_scene_file(path)
    path.write_text(json.dumps({**encoded, "intrinsics": {"width": 64}}))
    with pytest.raises(SceneError, match="Malformed scene"):
        load_scene_file(path)
    with pytest.raises(SceneError, match="neither a scene file nor"):
        resolve_scene("teapot")


def test_multi_view_depth_consistency() -> None:
    scene = four_object_scene()
    intrinsics = CameraIntrinsics.from_fov(96, 72, 50.0)
    spec = TrajectorySpec("hemisphere", 0.8, tuple(scene.center()), 3)  # type: ignore
    ds = make_dataset(scene, intrinsics, spec, Rng(4))
    directions = _pixel_directions(intrinsics)
    checked = 0
    consistent = 0
    for a, b in itertools.permutations(ds.frames, 2):
        points = a.pose.translation + a.depth[..., None] * (directions @ a.pose.rotation_matrix().T)
        selected = (a.mask > 0) & (a.depth > 0)
        p = points[selected]
        ids = a.mask[selected]
        cam = (p - b.pose.translation) @ b.pose.rotation_matrix()
        z = np.maximum(cam[:, 2], 1e-9)
        # Pixel centers sit at +0.5, so the continuous projection floors to the pixel index.
        u = np.floor(intrinsics.fx * cam[:, 0] / z + intrinsics.cx).astype(np.int64)
        v = np.floor(intrinsics.fy * cam[:, 1] / z + intrinsics.cy).astype(np.int64)
        dist = np.linalg.norm(p - b.pose.translation, axis=-1)
        inside = (cam[:, 2] > 0.01) & (u >= 1) & (u < intrinsics.width - 1)
        inside &= (v >= 1) & (v < intrinsics.height - 1)
        for i in np.flatnonzero(inside):
            depth = b.depth[v[i] - 1 : v[i] + 2, u[i] - 1 : u[i] + 2]
            mask = b.mask[v[i] - 1 : v[i] + 2, u[i] - 1 : u[i] + 2]
            same = (mask == ids[i]) & (np.abs(depth - dist[i]) < 0.02)
            occluded = (depth > 0) & (depth < dist[i] - 1e-3)
            checked += 1
            consistent += int(np.any(same) or np.any(occluded))
    assert checked > 200
    assert consistent >= 0.99 * checked, (consistent, checked)
