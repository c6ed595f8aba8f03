"""
Controlled corruption of instance masks (boundary patches down to a target IoU) and camera
poses (Gaussian translation noise and rotation about a random axis through the camera center).
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from objnerf.datamodel import (
    Frame,
    Pose,
    Rng,
    SceneDataset,
    quat_from_axis_angle,
    quat_multiply,
)
from objnerf.errors import CorruptionError, DatasetError

logger = logging.getLogger(__name__)

_EIGHT_NEIGHBORS = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskNoiseSpec:
    """
    :param target_iou: IoU of the corrupted region with the original one.
    :param patch_radius_range: Patch radii in pixels at ``reference_width``, scaled with the image width.
    :param mode: ``balanced`` adds and removes patches with equal probability, ``dilate`` only adds, ``erode`` only removes.
    :param tolerance: Stop once the IoU is within this distance of the target.
    """

    target_iou: float
    patch_radius_range: Tuple[float, float] = (2.0, 8.0)
    reference_width: int = 640
    mode: str = "balanced"
    tolerance: float = 0.01
    max_iterations: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        assert 0.0 < self.target_iou <= 1.0, f"target_iou must be in (0, 1], got {self.target_iou}"
        assert 0 < self.patch_radius_range[0] <= self.patch_radius_range[1]
        assert self.mode in ("balanced", "dilate", "erode"), f"Unknown mask noise mode {self.mode}"

    def radius_range(self, width: int) -> Tuple[float, float]:
        scale = width / self.reference_width
        lo, hi = self.patch_radius_range
        return max(lo * scale, 1.0), max(hi * scale, 1.0)


@dataclass(frozen=True)
class PoseNoiseSpec:
    """
    :param sigma_t: Standard deviation of the translation noise per axis, meters.
    :param sigma_r: Standard deviation of the rotation angle, radians.
    :param fixed_axis: Rotate every pose about this world axis instead of a random one.
    """

    sigma_t: float = 0.0
    sigma_r: float = 0.0
    fixed_axis: Optional[Tuple[float, float, float]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        assert self.sigma_t >= 0 and self.sigma_r >= 0, (
            f"Noise levels must be non-negative: sigma_t={self.sigma_t} sigma_r={self.sigma_r}"
        )


def mask_iou(a: npt.NDArray[np.uint8], b: npt.NDArray[np.uint8], object_id: int) -> float:
    if a.shape != b.shape:
        raise DatasetError(f"dimension mismatch: {a.shape} != {b.shape}")
    region_a = a == object_id
    region_b = b == object_id
    union = int(np.sum(region_a | region_b))
    if union == 0:
        return 1.0
    return int(np.sum(region_a & region_b)) / union


def _disk(shape: Tuple[int, int], cy: int, cx: int, radius: float) -> Tuple[slice, slice, npt.NDArray[np.bool_]]:
    r = int(math.ceil(radius))
    y0, y1 = max(cy - r, 0), min(cy + r + 1, shape[0])
    x0, x1 = max(cx - r, 0), min(cx + r + 1, shape[1])
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    return slice(y0, y1), slice(x0, x1), inside


def corrupt_mask(
    mask: npt.NDArray[np.uint8], object_id: int, spec: MaskNoiseSpec, rng: Rng
) -> npt.NDArray[np.uint8]:
    """
    Stamps filled circles on the boundary of the ``object_id`` region until its IoU with the
    original region is within ``spec.tolerance`` of ``spec.target_iou``.

    Added patches are centered on background pixels next to the region and may only cover
    background, removed patches are centered on region pixels next to the background. A stamp
    that would take the IoU below ``target_iou - tolerance`` is discarded.
    """
    original = mask == object_id
    if not original.any():
        raise CorruptionError(f"no boundary: object {object_id} is not in the mask")
    if spec.target_iou >= 1.0:
        return mask.copy()

    others = (mask != object_id) & (mask != 0)
    current = original.copy()
    intersection = int(original.sum())
    union = intersection
    r_lo, r_hi = spec.radius_range(mask.shape[1])
    lower = spec.target_iou - spec.tolerance

    for _ in range(spec.max_iterations):
        if abs(intersection / union - spec.target_iou) <= spec.tolerance:
            break
        if spec.mode == "balanced":
            add = bool(rng.uniform() < 0.5)
        else:
            add = spec.mode == "dilate"
        if add:
            candidates = ndimage.binary_dilation(current, _EIGHT_NEIGHBORS) & ~current & ~others
        else:
            candidates = current & ~ndimage.binary_erosion(
                current, _EIGHT_NEIGHBORS, border_value=1
            )
        ys, xs = np.nonzero(candidates)
        if len(ys) == 0:
            continue
        k = int(rng.integers(0, len(ys)))
        radius = float(rng.uniform(None, r_lo, r_hi))
        rows, cols, disk = _disk(mask.shape, int(ys[k]), int(xs[k]), radius)
        window = current[rows, cols]
        window_original = original[rows, cols]
        if add:
            change = disk & ~window & ~others[rows, cols]
            d_inter = int(np.sum(change & window_original))
            d_union = int(np.sum(change & ~window_original))
        else:
            change = disk & window
            d_inter = -int(np.sum(change & window_original))
            d_union = -int(np.sum(change & ~window_original))
        if union + d_union == 0 or (intersection + d_inter) / (union + d_union) < lower:
            continue
        window[change] = add
        intersection += d_inter
        union += d_union
    if abs(intersection / union - spec.target_iou) > spec.tolerance:
        raise CorruptionError(
            f"target unreachable: IoU {intersection / union:.3f} after {spec.max_iterations} "
            f"iterations, target {spec.target_iou}"
        )

    out = mask.copy()
    out[original & ~current] = 0
    out[current & ~original] = object_id
    return out


def corrupt_poses(poses: Sequence[Pose], spec: PoseNoiseSpec, rng: Rng) -> List[Pose]:
    """
    Adds ``N(0, sigma_t^2)`` noise to every camera center and rotates every camera about its
    center by an angle ``N(0, sigma_r^2)`` around a random axis. Each pose draws from its own
    substream, so results do not depend on the number of poses.
    """
    noisy = []
    for i, pose in enumerate(poses):
        sub = rng.fork(i)
        eta = sub.normal(3, spec.sigma_t)
        axis = sub.unit_vectors(1)[0]
        theta = float(sub.normal(None, spec.sigma_r))
        if spec.fixed_axis is not None:
            axis = np.asarray(spec.fixed_axis, dtype=np.float64)
        rotation = pose.rotation
        if spec.sigma_r > 0:
            rotation = quat_multiply(quat_from_axis_angle(axis, theta), pose.rotation)
            rotation = rotation / np.linalg.norm(rotation)
        translation = pose.translation
        if spec.sigma_t > 0:
            translation = translation + eta
        noisy.append(Pose(rotation, translation))
    return noisy


@dataclass
class CorruptionReport:
    mask_spec: Optional[MaskNoiseSpec]
    pose_spec: Optional[PoseNoiseSpec]
    mask_ious: Dict[int, List[float]] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        return {
            "mask_noise": None if self.mask_spec is None else asdict(self.mask_spec),
            "pose_noise": None if self.pose_spec is None else asdict(self.pose_spec),
            "mask_iou": {str(k): v for k, v in self.mask_ious.items()},
        }


def corrupt_dataset(
    ds: SceneDataset,
    mask_spec: Optional[MaskNoiseSpec] = None,
    pose_spec: Optional[PoseNoiseSpec] = None,
    object_ids: Optional[Sequence[int]] = None,
) -> Tuple[SceneDataset, CorruptionReport]:
    """
    Corrupts the masks of every object present in each frame and/or all poses. Each frame and
    object draws from its own substream of ``Rng(spec.seed)``.
    """
    ids = [o.id for o in ds.objects] if object_ids is None else list(object_ids)
    report = CorruptionReport(mask_spec, pose_spec, {i: [] for i in ids})
    frames = list(ds.frames)
    if mask_spec is not None and mask_spec.target_iou < 1.0:
        rng = Rng(mask_spec.seed).fork("mask")
        corrupted = []
        for i, frame in enumerate(frames):
            mask = frame.mask
            for object_id in ids:
                if not np.any(frame.mask == object_id):
                    continue
                mask = corrupt_mask(mask, object_id, mask_spec, rng.fork(i, object_id))
                report.mask_ious[object_id].append(mask_iou(mask, frame.mask, object_id))
            corrupted.append(Frame(frame.rgb, frame.depth, mask, frame.pose))
        frames = corrupted
        logger.info(f"corrupted masks of {len(frames)} frames to IoU {mask_spec.target_iou}")
    if pose_spec is not None and (pose_spec.sigma_t > 0 or pose_spec.sigma_r > 0):
        poses = corrupt_poses([f.pose for f in frames], pose_spec, Rng(pose_spec.seed).fork("pose"))
        frames = [Frame(f.rgb, f.depth, f.mask, p) for f, p in zip(frames, poses)]
    return SceneDataset(ds.intrinsics, frames, ds.objects), report
