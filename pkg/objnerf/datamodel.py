"""
Geometric and raster types shared by every module, the dataset directory format and
the deterministic random number streams.

Conventions: poses map camera coordinates to world coordinates, cameras look along
their +z axis with +x to the right and +y down, and pixel ``(u, v)`` has its center at
``(u + 0.5, v + 0.5)``.
"""
import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from PIL import Image

from objnerf.errors import DatasetError

logger = logging.getLogger(__name__)

Vec3 = npt.NDArray[np.float64]

DPT_MAGIC = b"DPT1"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera model. All values in pixels."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        assert self.width >= 1 and self.height >= 1, (
            f"Image size must be positive: {self.width}x{self.height}"
        )
        assert self.fx > 0 and self.fy > 0, f"Focal lengths must be positive: {self.fx}, {self.fy}"
        assert 0 <= self.cx < self.width and 0 <= self.cy < self.height, (
            f"Principal point ({self.cx}, {self.cy}) outside of {self.width}x{self.height} image"
        )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(0.5 * math.radians(fov_deg))
        return cls(width, height, f, f, width / 2.0, height / 2.0)

    def to_json(self) -> Dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "CameraIntrinsics":
        return cls(
            width=int(obj["width"]),
            height=int(obj["height"]),
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
        )


def quat_multiply(a: npt.NDArray[np.float64], b: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    # Shepperd's method, branching on the largest diagonal term.
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * math.sqrt(1.0 + trace)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    quat = np.array(q)
    if quat[0] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> npt.NDArray[np.float64]:
    axis_ = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis_)
    if norm == 0.0 or angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis_ / norm])


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid world-from-camera transform.

    :param rotation: Unit quaternion ``(w, x, y, z)``.
    :param translation: Camera center in world coordinates, meters.
    """

    rotation: npt.NDArray[np.float64]
    translation: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        assert norm > 0.0, "Rotation quaternion must be nonzero"
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: npt.ArrayLike) -> "Pose":
        m_ = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(matrix_to_quat(m_[:3, :3]), m_[:3, 3].copy())

    @classmethod
    def from_rotation_matrix(cls, r: npt.ArrayLike, t: npt.ArrayLike) -> "Pose":
        return cls(matrix_to_quat(np.asarray(r, dtype=np.float64)), np.asarray(t, dtype=np.float64))

    def rotation_matrix(self) -> npt.NDArray[np.float64]:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> npt.NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "Pose", atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Returns ``a ∘ b``: first apply ``b``, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    q /= np.linalg.norm(q)
    return Pose(q, a.rotation_matrix() @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    q_inv = np.array([a.rotation[0], -a.rotation[1], -a.rotation[2], -a.rotation[3]])
    return Pose(q_inv, -(quat_to_matrix(q_inv) @ a.translation))


def pose_apply(a: Pose, p: npt.ArrayLike) -> Vec3:
    return a.rotation_matrix() @ np.asarray(p, dtype=np.float64) + a.translation


@dataclass(frozen=True, eq=False)
class Frame:
    """
    One posed RGB-D image with instance labels.

    :param rgb: ``H x W x 3`` float32 colors in ``[0, 1]``.
    :param depth: ``H x W`` float32 distances along the pixel rays in meters, 0 where invalid.
    :param mask: ``H x W`` uint8 instance ids, 0 for background.
    :param pose: World-from-camera pose.
    """

    rgb: npt.NDArray[np.float32]
    depth: npt.NDArray[np.float32]
    mask: npt.NDArray[np.uint8]
    pose: Pose

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    """
    An object of interest and its loose axis-aligned bounding box.

    :param id: Instance id used in the masks (1-255).
    :param name: Human readable label.
    :param aabb_min: Lower box corner in meters.
    :param aabb_max: Upper box corner in meters.
    """

    id: int
    name: str
    aabb_min: npt.NDArray[np.float64]
    aabb_max: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        lo = np.array(self.aabb_min, dtype=np.float64).reshape(3)
        hi = np.array(self.aabb_max, dtype=np.float64).reshape(3)
        assert 1 <= self.id <= 255, f"Instance id must be in [1, 255], got {self.id}"
        assert np.all(lo < hi), f"Degenerate bounding box for object {self.name}: {lo} >= {hi}"
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)

    @property
    def center(self) -> Vec3:
        return 0.5 * (self.aabb_min + self.aabb_max)

    def to_json(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "aabb_min": self.aabb_min.tolist(),
            "aabb_max": self.aabb_max.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "ObjectSpec":
        return cls(
            id=int(obj["id"]),
            name=str(obj["name"]),
            aabb_min=np.array(obj["aabb_min"], dtype=np.float64),
            aabb_max=np.array(obj["aabb_max"], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class SceneDataset:
    intrinsics: CameraIntrinsics
    frames: List[Frame]
    objects: List[ObjectSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.frames) == 0:
            raise DatasetError("dataset contains no frames")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate instance ids: {ids}")
        declared = set(ids) | {0}
        shape = (self.intrinsics.height, self.intrinsics.width)
        for i, frame in enumerate(self.frames):
            if (
                frame.rgb.shape != shape + (3,)
                or frame.depth.shape != shape
                or frame.mask.shape != shape
            ):
                raise DatasetError(
                    f"inconsistent raster size in frame {i}: expected {shape}, got "
                    f"rgb={frame.rgb.shape} depth={frame.depth.shape} mask={frame.mask.shape}"
                )
            if np.any(frame.depth < 0):
                raise DatasetError(f"negative depth in frame {i}")
            undeclared = set(np.unique(frame.mask).tolist()) - declared
            if undeclared:
                raise DatasetError(f"undeclared instance id {sorted(undeclared)} in frame {i}")

    def object_by_id(self, object_id: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise DatasetError(f"undeclared instance id {object_id}")

    def object_by_name(self, name: str) -> ObjectSpec:
        for o in self.objects:
            if o.name == name:
                return o
        raise DatasetError(f"no object named {name!r}")

    def find_object(self, key: Union[int, str]) -> ObjectSpec:
        if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
            return self.object_by_id(int(key))
        return self.object_by_name(key)


def _stream_id(key: Union[int, str]) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    assert key >= 0, f"Stream keys must be non-negative, got {key}"
    return key


class Rng:
    """
    Counter-based random stream (Philox) keyed by a 64-bit seed and a stream path.

    Streams forked with different keys are statistically independent, so adding draws
    to one consumer never shifts the draws of another.
    """

    def __init__(self, seed: int, stream: Tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream = stream
        self._generator = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=stream))
        )

    def fork(self, *key: Union[int, str]) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_stream_id(k) for k in key))

    def uniform(
        self, size: Union[None, int, Tuple[int, ...]] = None, low: float = 0.0, high: float = 1.0
    ) -> Any:
        return self._generator.uniform(low, high, size)

    def normal(self, size: Union[None, int, Tuple[int, ...]] = None, scale: float = 1.0) -> Any:
        return self._generator.normal(0.0, scale, size)

    def integers(
        self, low: int, high: int, size: Union[None, int, Tuple[int, ...]] = None
    ) -> Any:
        return self._generator.integers(low, high, size)

    def unit_vectors(self, n: int) -> npt.NDArray[np.float64]:
        v = self._generator.normal(0.0, 1.0, (n, 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # Probability zero, but keep the output well defined.
        v[norms[:, 0] == 0.0] = np.array([0.0, 0.0, 1.0])
        norms[norms == 0.0] = 1.0
        return v / norms  # type: ignore


def write_dpt(path: Union[str, Path], depth: npt.NDArray[np.float32]) -> None:
    height, width = depth.shape
    with open(path, "wb") as f:
        f.write(DPT_MAGIC)
        f.write(struct.pack("<II", width, height))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_dpt(path: Union[str, Path]) -> npt.NDArray[np.float32]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    data = path.read_bytes()
    if data[:4] != DPT_MAGIC:
        raise DatasetError(f"not a depth file: {path}")
    width, height = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * width * height:
        raise DatasetError(f"truncated depth file: {path}")
    depth = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width)
    return depth.astype(np.float32)


def _read_png(path: Path, mode: str) -> npt.NDArray[np.uint8]:
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert(mode), dtype=np.uint8).copy()


def rgb_to_uint8(rgb: npt.NDArray[np.float32]) -> npt.NDArray[np.uint8]:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)  # type: ignore


def rgb_from_uint8(rgb: npt.NDArray[np.uint8]) -> npt.NDArray[np.float32]:
    return rgb.astype(np.float32) / np.float32(255.0)  # type: ignore


def save_dataset(ds: SceneDataset, path: Union[str, Path]) -> None:
    root = Path(path)
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, frame in enumerate(ds.frames):
        names = {
            "rgb": f"rgb/{i:04d}.png",
            "depth": f"depth/{i:04d}.dpt",
            "mask": f"mask/{i:04d}.png",
        }
        Image.fromarray(rgb_to_uint8(frame.rgb), mode="RGB").save(root / names["rgb"])
        write_dpt(root / names["depth"], frame.depth)
        Image.fromarray(np.ascontiguousarray(frame.mask, dtype=np.uint8), mode="L").save(
            root / names["mask"]
        )
        frames.append(
            {**names, "camera_to_world": frame.pose.matrix().flatten().tolist()}
        )
    manifest = {
        "camera": ds.intrinsics.to_json(),
        "frames": frames,
        "objects": [o.to_json() for o in ds.objects],
    }
    with open(root / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.debug(f"wrote {len(frames)} frames to {root}")


def load_dataset(path: Union[str, Path]) -> SceneDataset:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    intrinsics = CameraIntrinsics.from_json(manifest["camera"])
    frames = []
    for entry in manifest["frames"]:
        frames.append(
            Frame(
                rgb=rgb_from_uint8(_read_png(root / entry["rgb"], "RGB")),
                depth=read_dpt(root / entry["depth"]),
                mask=_read_png(root / entry["mask"], "L"),
                pose=Pose.from_matrix(entry["camera_to_world"]),
            )
        )
    objects = [ObjectSpec.from_json(o) for o in manifest["objects"]]
    return SceneDataset(intrinsics=intrinsics, frames=frames, objects=objects)


def save_poses(poses: Sequence[Pose], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(
            {"camera_to_world": [p.matrix().flatten().tolist() for p in poses]}, f, indent=2
        )


def load_poses(path: Union[str, Path]) -> List[Pose]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    with open(path) as f:
        return [Pose.from_matrix(m) for m in json.load(f)["camera_to_world"]]


def with_poses(ds: SceneDataset, poses: Optional[Sequence[Pose]]) -> SceneDataset:
    if poses is None:
        return ds
    if len(poses) != len(ds.frames):
        raise DatasetError(f"expected {len(ds.frames)} poses, got {len(poses)}")
    return dataclasses.replace(
        ds, frames=[dataclasses.replace(f, pose=p) for f, p in zip(ds.frames, poses)]
    )
