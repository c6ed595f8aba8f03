"""
Deterministic ray tracer producing ground-truth RGB-D datasets with instance masks for
scenes built from spheres, boxes and cylinders resting on a table plane.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from objnerf.datamodel import (
    CameraIntrinsics,
    Frame,
    ObjectSpec,
    Pose,
    Rng,
    SceneDataset,
    rgb_from_uint8,
    rgb_to_uint8,
)
from objnerf.errors import SceneError
from objnerf.volrender import NEAR_DISTANCE

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class Sphere:
    center: Array
    radius: float

    def __post_init__(self) -> None:
        assert self.radius > 0, f"Sphere radius must be positive, got {self.radius}"
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def bounds(self) -> Tuple[Array, Array]:
        return self.center - self.radius, self.center + self.radius

    def intersect(self, o: Array, d: Array) -> Tuple[Array, Array]:
        oc = o - self.center
        b = (oc * d).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > NEAR_DISTANCE, t0, np.where(t1 > NEAR_DISTANCE, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius


@dataclass(frozen=True, eq=False)
class Box:
    min: Array
    max: Array

    def __post_init__(self) -> None:
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        assert np.all(lo < hi), f"Degenerate box: {lo} >= {hi}"
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def bounds(self) -> Tuple[Array, Array]:
        return self.min, self.max

    def intersect(self, o: Array, d: Array) -> Tuple[Array, Array]:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.min - o) * inv
            t1 = (self.max - o) * inv
        parallel = d == 0
        inside = (o >= self.min) & (o <= self.max)
        t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
        t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
        entry = t_lo.max(-1)
        exit = t_hi.min(-1)
        hit = exit >= np.maximum(entry, NEAR_DISTANCE)
        t = np.where(entry > NEAR_DISTANCE, entry, exit)
        t = np.where(hit, t, np.inf)
        axis = np.where(entry > NEAR_DISTANCE, t_lo.argmax(-1), t_hi.argmin(-1))
        normal = np.zeros_like(d)
        rows = np.arange(d.shape[0])
        normal[rows, axis] = -np.sign(d[rows, axis])
        return t, normal


@dataclass(frozen=True, eq=False)
class Cylinder:
    base: Array
    axis: Array
    radius: float
    height: float

    def __post_init__(self) -> None:
        assert self.radius > 0 and self.height > 0, (
            f"Cylinder extents must be positive: radius={self.radius} height={self.height}"
        )
        a = np.asarray(self.axis, dtype=np.float64)
        object.__setattr__(self, "base", np.asarray(self.base, dtype=np.float64))
        object.__setattr__(self, "axis", a / np.linalg.norm(a))

    def bounds(self) -> Tuple[Array, Array]:
        top = self.base + self.height * self.axis
        spread = self.radius * np.sqrt(np.clip(1.0 - self.axis**2, 0.0, 1.0))
        return np.minimum(self.base, top) - spread, np.maximum(self.base, top) + spread

    def intersect(self, o: Array, d: Array) -> Tuple[Array, Array]:
        a = self.axis
        oc = o - self.base
        oz = oc @ a
        dz = d @ a
        o_perp = oc - oz[:, None] * a
        d_perp = d - dz[:, None] * a
        qa = (d_perp * d_perp).sum(-1)
        qb = (o_perp * d_perp).sum(-1)
        qc = (o_perp * o_perp).sum(-1) - self.radius**2
        disc = qb * qb - qa * qc
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.maximum(disc, 0.0))
            candidates = [(-qb - root) / qa, (-qb + root) / qa]
            sides = []
            for t in candidates:
                z = oz + t * dz
                ok = (disc >= 0) & (qa > 0) & (t > NEAR_DISTANCE) & (z >= 0) & (z <= self.height)
                sides.append(np.where(ok, t, np.inf))
            caps = []
            for level in (0.0, self.height):
                t = (level - oz) / dz
                p_perp = o_perp + t[:, None] * d_perp
                ok = (dz != 0) & (t > NEAR_DISTANCE) & ((p_perp * p_perp).sum(-1) <= self.radius**2)
                caps.append(np.where(ok, t, np.inf))
        all_t = np.stack(sides + caps, axis=-1)
        which = all_t.argmin(-1)
        t = all_t.min(-1)
        tt = np.where(np.isfinite(t), t, 0.0)
        side_normal = (o_perp + tt[:, None] * d_perp) / self.radius
        normal = np.where(
            (which < 2)[:, None],
            side_normal,
            np.where((which == 2)[:, None], -a, a),
        )
        return t, normal


Shape = Union[Sphere, Box, Cylinder]


@dataclass(frozen=True, eq=False)
class Albedo:
    """
    Surface color, either uniform or a procedural pattern alternating between two colors.

    :param pattern: One of ``uniform``, ``checker`` (3D checkerboard) or ``stripe`` (stripes along z).
    :param period: Pattern cell size in meters.
    """

    color: Tuple[float, float, float]
    alt_color: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    pattern: str = "uniform"
    period: float = 0.03

    def __post_init__(self) -> None:
        assert self.pattern in ("uniform", "checker", "stripe"), f"Unknown pattern {self.pattern}"
        assert self.period > 0

    def evaluate(self, p: Array) -> Array:
        a = np.asarray(self.color, dtype=np.float64)
        if self.pattern == "uniform":
            return np.broadcast_to(a, p.shape).copy()
        cells = np.floor(p / self.period).astype(np.int64)
        if self.pattern == "checker":
            parity = cells.sum(-1) % 2
        else:
            parity = cells[:, 2] % 2
        b = np.asarray(self.alt_color, dtype=np.float64)
        return np.where(parity[:, None] == 0, a, b)


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: Shape
    albedo: Albedo
    object_id: int = 0
    name: str = ""


@dataclass(frozen=True, eq=False)
class Light:
    """Directional light. ``direction`` points from the scene towards the light."""

    direction: Tuple[float, float, float] = (0.3, -0.4, 1.0)
    ambient: float = 0.35


@dataclass(frozen=True, eq=False)
class SceneDescription:
    """
    :param table_height: Height of the table plane (instance id 0), ``None`` for no table.
    :param table_extent: Half side length of the square table, ``None`` for an infinite plane.
    """

    primitives: List[Primitive]
    light: Light = field(default_factory=Light)
    table_height: Optional[float] = 0.0
    table_extent: Optional[float] = 0.75
    table_albedo: Albedo = field(
        default_factory=lambda: Albedo((0.55, 0.45, 0.35), (0.45, 0.35, 0.25), "checker", 0.05)
    )
    background: Tuple[float, float, float] = (0.8, 0.85, 0.9)

    def __post_init__(self) -> None:
        assert any(p.object_id != 0 for p in self.primitives), (
            "Scene must contain at least one object primitive"
        )
        for p in self.primitives:
            assert 0 <= p.object_id <= 255, f"Invalid instance id {p.object_id}"

    def object_ids(self) -> List[int]:
        return sorted({p.object_id for p in self.primitives if p.object_id != 0})

    def object_name(self, object_id: int) -> str:
        for p in self.primitives:
            if p.object_id == object_id and p.name:
                return p.name
        return f"object{object_id}"

    def tight_bounds(self, object_id: int) -> Tuple[Array, Array]:
        bounds = [p.shape.bounds() for p in self.primitives if p.object_id == object_id]
        assert bounds, f"No primitive with instance id {object_id}"
        lo = np.min([b[0] for b in bounds], axis=0)
        hi = np.max([b[1] for b in bounds], axis=0)
        return lo, hi

    def center(self) -> Array:
        ids = self.object_ids()
        lo = np.min([self.tight_bounds(i)[0] for i in ids], axis=0)
        hi = np.max([self.tight_bounds(i)[1] for i in ids], axis=0)
        return 0.5 * (lo + hi)  # type: ignore


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Camera trajectory around ``center``.

    :param kind: ``hemisphere`` samples positions on the upper half sphere, ``arc`` sweeps the
        azimuth at a roughly constant elevation like a handheld capture.
    :param elevation_range: Spread of elevations of ``arc`` trajectories, radians.
    """

    kind: str
    radius: float
    center: Tuple[float, float, float]
    n_views: int
    elevation_range: float = 0.0
    elevation: float = math.radians(30.0)
    min_elevation: float = math.radians(15.0)
    max_elevation: float = math.radians(80.0)
    azimuth_range: float = math.pi

    def __post_init__(self) -> None:
        assert self.kind in ("hemisphere", "arc"), f"Unknown trajectory kind {self.kind}"
        assert self.radius > 0, f"Trajectory radius must be positive, got {self.radius}"
        assert self.n_views >= 1, f"Trajectory needs at least one view, got {self.n_views}"
        assert 0.0 <= self.min_elevation <= self.max_elevation <= 0.5 * math.pi


def look_at(eye: npt.ArrayLike, target: npt.ArrayLike) -> Pose:
    """World-from-camera pose at ``eye`` whose optical axis passes through ``target``."""
    eye_ = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye_
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose.from_rotation_matrix(np.stack([right, down, forward], axis=1), eye_)


def sample_trajectory(spec: TrajectorySpec, rng: Rng) -> List[Pose]:
    center = np.asarray(spec.center, dtype=np.float64)
    if spec.kind == "hemisphere":
        lo = math.sin(spec.min_elevation)
        hi = math.sin(spec.max_elevation)
        elevation = np.arcsin(rng.uniform(spec.n_views, lo, hi))
        azimuth = rng.uniform(spec.n_views, 0.0, 2.0 * math.pi)
    else:
        start = rng.uniform(None, 0.0, 2.0 * math.pi)
        azimuth = start + np.linspace(
            -0.5 * spec.azimuth_range, 0.5 * spec.azimuth_range, spec.n_views
        )
        u = rng.uniform(spec.n_views)
        elevation = spec.elevation + spec.elevation_range * (u - 0.5)
    offsets = np.stack(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ],
        axis=-1,
    )
    return [look_at(center + spec.radius * o, center) for o in offsets]


def _trace(scene: SceneDescription, o: Array, d: Array) -> Tuple[Array, Array, Array, Array]:
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    best_normal = np.zeros((n, 3))
    best_index = np.full(n, -1)
    for i, prim in enumerate(scene.primitives):
        t, normal = prim.shape.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_normal[closer] = normal[closer]
        best_index[closer] = i
    if scene.table_height is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.table_height - o[:, 2]) / d[:, 2]
        ok = (d[:, 2] != 0) & (t > NEAR_DISTANCE)
        if scene.table_extent is not None:
            p = o + np.where(ok, t, 0.0)[:, None] * d
            ok &= (np.abs(p[:, 0]) <= scene.table_extent) & (np.abs(p[:, 1]) <= scene.table_extent)
        closer = ok & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_normal[closer] = np.array([0.0, 0.0, 1.0])
        best_index[closer] = len(scene.primitives)
    return best_t, best_normal, best_index, o + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * d


def render_ground_truth(
    scene: SceneDescription, intrinsics: CameraIntrinsics, pose: Pose
) -> Frame:
    """
    Renders one frame. Depth is the distance along the unit pixel ray, colors are Lambertian
    without shadows and quantized to 8 bits so they survive a PNG round trip unchanged.
    """
    vs, us = np.meshgrid(
        np.arange(intrinsics.height, dtype=np.float64),
        np.arange(intrinsics.width, dtype=np.float64),
        indexing="ij",
    )
    d_cam = np.stack(
        [
            (us.ravel() + 0.5 - intrinsics.cx) / intrinsics.fx,
            (vs.ravel() + 0.5 - intrinsics.cy) / intrinsics.fy,
            np.ones(us.size),
        ],
        axis=-1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d = d_cam @ pose.rotation_matrix().T
    o = np.broadcast_to(pose.translation, d.shape)

    t, normal, index, p = _trace(scene, o, d)
    hit = np.isfinite(t)

    albedo = np.tile(np.asarray(scene.background, dtype=np.float64), (d.shape[0], 1))
    ids = np.zeros(d.shape[0], dtype=np.uint8)
    for i, prim in enumerate(scene.primitives):
        sel = index == i
        if np.any(sel):
            albedo[sel] = prim.albedo.evaluate(p[sel])
            ids[sel] = prim.object_id
    sel = index == len(scene.primitives)
    if np.any(sel):
        albedo[sel] = scene.table_albedo.evaluate(p[sel])

    light = np.asarray(scene.light.direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    facing = np.where(((normal * d).sum(-1) > 0)[:, None], -normal, normal)
    lambert = np.clip(facing @ light, 0.0, 1.0)
    shade = scene.light.ambient + (1.0 - scene.light.ambient) * lambert
    rgb = np.where(hit[:, None], albedo * shade[:, None], albedo)

    shape = (intrinsics.height, intrinsics.width)
    return Frame(
        rgb=rgb_from_uint8(rgb_to_uint8(rgb.reshape(shape + (3,)).astype(np.float32))),
        depth=np.where(hit, t, 0.0).reshape(shape).astype(np.float32),
        mask=ids.reshape(shape),
        pose=pose,
    )


def object_specs(scene: SceneDescription, looseness: float = 1.25) -> List[ObjectSpec]:
    """Loose bounding boxes: tight primitive bounds scaled by ``looseness`` about their center."""
    assert looseness >= 1.0, f"Looseness below 1 would not enclose the objects: {looseness}"
    specs = []
    for object_id in scene.object_ids():
        lo, hi = scene.tight_bounds(object_id)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * looseness
        specs.append(
            ObjectSpec(object_id, scene.object_name(object_id), center - half, center + half)
        )
    return specs


def render_frames(
    scene: SceneDescription,
    intrinsics: CameraIntrinsics,
    poses: Sequence[Pose],
    progress: bool = False,
) -> List[Frame]:
    return [
        render_ground_truth(scene, intrinsics, pose)
        for pose in tqdm(poses, desc="render", disable=not progress, leave=False)
    ]


def make_dataset(
    scene: SceneDescription,
    intrinsics: CameraIntrinsics,
    trajectory: TrajectorySpec,
    rng: Rng,
    looseness: float = 1.25,
    progress: bool = False,
) -> SceneDataset:
    poses = sample_trajectory(trajectory, rng)
    frames = render_frames(scene, intrinsics, poses, progress)
    logger.debug(f"rendered {len(frames)} frames at {intrinsics.width}x{intrinsics.height}")
    return SceneDataset(
        intrinsics=intrinsics, frames=frames, objects=object_specs(scene, looseness)
    )


def _shape_to_json(shape: Shape) -> Dict[str, Any]:
    if isinstance(shape, Sphere):
        return {"type": "sphere", "center": shape.center.tolist(), "radius": shape.radius}
    if isinstance(shape, Box):
        return {"type": "box", "min": shape.min.tolist(), "max": shape.max.tolist()}
    return {
        "type": "cylinder",
        "base": shape.base.tolist(),
        "axis": shape.axis.tolist(),
        "radius": shape.radius,
        "height": shape.height,
    }


def _shape_from_json(obj: Dict[str, Any]) -> Shape:
    kind = obj["type"]
    if kind == "sphere":
        return Sphere(np.array(obj["center"]), float(obj["radius"]))
    if kind == "box":
        return Box(np.array(obj["min"]), np.array(obj["max"]))
    if kind == "cylinder":
        return Cylinder(
            np.array(obj["base"]),
            np.array(obj.get("axis", [0.0, 0.0, 1.0])),
            float(obj["radius"]),
            float(obj["height"]),
        )
    raise ValueError(f"Unknown primitive type {kind!r}")


def _albedo_to_json(albedo: Albedo) -> Dict[str, Any]:
    return {
        "color": list(albedo.color),
        "alt_color": list(albedo.alt_color),
        "pattern": albedo.pattern,
        "period": albedo.period,
    }


def _albedo_from_json(obj: Dict[str, Any]) -> Albedo:
    return Albedo(
        color=tuple(obj["color"]),  # type: ignore
        alt_color=tuple(obj.get("alt_color", (1.0, 1.0, 1.0))),  # type: ignore
        pattern=obj.get("pattern", "uniform"),
        period=float(obj.get("period", 0.03)),
    )


def scene_to_json(scene: SceneDescription) -> Dict[str, Any]:
    return {
        "primitives": [
            {
                "shape": _shape_to_json(p.shape),
                "albedo": _albedo_to_json(p.albedo),
                "object_id": p.object_id,
                "name": p.name,
            }
            for p in scene.primitives
        ],
        "light": {"direction": list(scene.light.direction), "ambient": scene.light.ambient},
        "table_height": scene.table_height,
        "table_extent": scene.table_extent,
        "table_albedo": _albedo_to_json(scene.table_albedo),
        "background": list(scene.background),
    }


def scene_from_json(obj: Dict[str, Any]) -> SceneDescription:
    light = obj.get("light", {})
    kwargs: Dict[str, Any] = {}
    if "table_albedo" in obj:
        kwargs["table_albedo"] = _albedo_from_json(obj["table_albedo"])
    if "background" in obj:
        kwargs["background"] = tuple(obj["background"])
    return SceneDescription(
        primitives=[
            Primitive(
                shape=_shape_from_json(p["shape"]),
                albedo=_albedo_from_json(p["albedo"]),
                object_id=int(p.get("object_id", 0)),
                name=p.get("name", ""),
            )
            for p in obj["primitives"]
        ],
        light=Light(
            direction=tuple(light.get("direction", Light.direction)),  # type: ignore
            ambient=float(light.get("ambient", Light.ambient)),
        ),
        table_height=obj.get("table_height", 0.0),
        table_extent=obj.get("table_extent", 0.75),
        **kwargs,
    )


# Keys of the optional ``trajectory`` block of a scene file, named like the ``SynthConfig`` fields.
TRAJECTORY_KEYS = (
    "trajectory",
    "n_views",
    "radius",
    "min_elevation_deg",
    "max_elevation_deg",
    "elevation_deg",
    "elevation_range_deg",
    "azimuth_range_deg",
)


@dataclass(frozen=True, eq=False)
class SceneFile:
    """
    A scene with the capture setup stored next to it.

    :param trajectory: Trajectory settings keyed by ``SynthConfig`` field name.
    :param intrinsics: Camera intrinsics, ``None`` to derive them from the synthesis settings.
    """

    scene: SceneDescription
    trajectory: Dict[str, Any] = field(default_factory=dict)
    intrinsics: Optional[CameraIntrinsics] = None


def scene_file_from_json(obj: Dict[str, Any]) -> SceneFile:
    trajectory = dict(obj.get("trajectory", {}))
    unknown = sorted(set(trajectory) - set(TRAJECTORY_KEYS))
    if unknown:
        raise SceneError(f"Unknown trajectory keys {unknown}, expected a subset of {list(TRAJECTORY_KEYS)}")
    try:
        scene = scene_from_json(obj)
        intrinsics = CameraIntrinsics.from_json(obj["intrinsics"]) if "intrinsics" in obj else None
    except (KeyError, TypeError, ValueError) as e:
        raise SceneError(f"Malformed scene: {e!r}") from e
    return SceneFile(scene, trajectory, intrinsics)


def scene_file_to_json(setup: SceneFile) -> Dict[str, Any]:
    obj = scene_to_json(setup.scene)
    if setup.trajectory:
        obj["trajectory"] = dict(setup.trajectory)
    if setup.intrinsics is not None:
        obj["intrinsics"] = setup.intrinsics.to_json()
    return obj


def load_scene_file(path: Union[str, Path]) -> SceneFile:
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SceneError(f"Cannot read scene file {path}: {e}") from e
    return scene_file_from_json(obj)


def load_scene(path: Union[str, Path]) -> SceneDescription:
    return load_scene_file(path).scene


def save_scene(
    scene: SceneDescription,
    path: Union[str, Path],
    trajectory: Optional[Dict[str, Any]] = None,
    intrinsics: Optional[CameraIntrinsics] = None,
) -> None:
    with open(path, "w") as f:
        json.dump(scene_file_to_json(SceneFile(scene, trajectory or {}, intrinsics)), f, indent=2)
