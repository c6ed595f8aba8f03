"""
Splits the pixel rays of a dataset into positive, negative and masked rays for one target
object, using the instance masks and the ordering of bounding box entry distances.
"""
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch

from objnerf.datamodel import CameraIntrinsics, Frame, ObjectSpec, SceneDataset
from objnerf.errors import DatasetError
from objnerf.volrender import camera_directions, image_rays, intersect_aabb, pixel_grid

logger = logging.getLogger(__name__)


class RayClass(IntEnum):
    POSITIVE = 0
    NEGATIVE = 1
    MASKED = 2


CLASS_COLORS = {
    RayClass.POSITIVE: (40, 200, 60),
    RayClass.NEGATIVE: (255, 150, 30),
    RayClass.MASKED: (255, 110, 190),
}


@dataclass(frozen=True)
class ClassifiedPixel:
    frame_index: int
    u: int
    v: int
    ray_class: RayClass
    gt_color: Optional[Tuple[float, float, float]] = None
    gt_depth: Optional[float] = None


@dataclass
class FrameClasses:
    """
    Per-pixel classification of one frame.

    :param classes: ``H x W`` :class:`RayClass` values.
    :param dropped: ``H x W`` flags of rays that miss the target box.
    """

    classes: npt.NDArray[np.int8]
    dropped: npt.NDArray[np.bool_]

    def counts(self) -> Dict[str, int]:
        kept = ~self.dropped
        return {
            "positive": int(np.sum(kept & (self.classes == RayClass.POSITIVE))),
            "negative": int(np.sum(kept & (self.classes == RayClass.NEGATIVE))),
            "masked": int(np.sum(kept & (self.classes == RayClass.MASKED))),
            "dropped": int(np.sum(self.dropped)),
        }


def _check_ids(mask: npt.NDArray[np.uint8], objects: Sequence[ObjectSpec]) -> None:
    declared = {o.id for o in objects} | {0}
    undeclared = set(np.unique(mask).tolist()) - declared
    if undeclared:
        raise DatasetError(f"undeclared instance id {sorted(undeclared)}")


def _classify(
    mask_ids: torch.Tensor,
    origins: torch.Tensor,
    directions: torch.Tensor,
    target: ObjectSpec,
    others: Sequence[ObjectSpec],
) -> Tuple[torch.Tensor, torch.Tensor]:
    target_entry, _, target_hit = intersect_aabb(
        origins, directions, target.aabb_min, target.aabb_max
    )
    classes = torch.full_like(mask_ids, int(RayClass.NEGATIVE), dtype=torch.int8)
    classes[mask_ids == target.id] = int(RayClass.POSITIVE)
    for other in others:
        if other.id == target.id:
            continue
        labeled = mask_ids == other.id
        if not bool(labeled.any()):
            continue
        entry, _, hit = intersect_aabb(origins, directions, other.aabb_min, other.aabb_max)
        # Equal entry distances count as occluded.
        occluding = labeled & hit & (entry <= target_entry)
        classes[occluding] = int(RayClass.MASKED)
    return classes, ~target_hit


def classify_ray(
    u: int,
    v: int,
    frame: Frame,
    intrinsics: CameraIntrinsics,
    target: ObjectSpec,
    others: Sequence[ObjectSpec],
) -> RayClass:
    mask_id = int(frame.mask[v, u])
    _check_ids(np.array([mask_id], dtype=np.uint8), [target, *others])
    d_cam = camera_directions(intrinsics, torch.tensor([u]), torch.tensor([v]), torch.float64)
    directions = d_cam @ torch.as_tensor(frame.pose.rotation_matrix()).T
    origins = torch.as_tensor(frame.pose.translation)[None]
    classes, _ = _classify(torch.tensor([mask_id]), origins, directions, target, others)
    return RayClass(int(classes[0]))


def classify_frame(
    frame: Frame,
    intrinsics: CameraIntrinsics,
    target: ObjectSpec,
    objects: Sequence[ObjectSpec],
) -> FrameClasses:
    _check_ids(frame.mask, objects)
    origins, directions = image_rays(intrinsics, frame.pose)
    mask_ids = torch.as_tensor(frame.mask.astype(np.int64).reshape(-1))
    classes, dropped = _classify(mask_ids, origins, directions, target, objects)
    shape = (intrinsics.height, intrinsics.width)
    return FrameClasses(
        classes=classes.numpy().reshape(shape),
        dropped=dropped.numpy().reshape(shape),
    )


def visualize_classes(fc: FrameClasses) -> npt.NDArray[np.uint8]:
    """RGB image of a frame classification; dropped rays are black."""
    image = np.zeros(fc.classes.shape + (3,), dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        image[fc.classes == cls] = color
    image[fc.dropped] = 0
    return image


@dataclass
class RayIndex:
    """
    Positive and negative training rays of one target object, in frame-major row-major order.
    Masked and dropped rays are only counted.

    :param frame_index: Frame of each ray.
    :param pixels: ``K x 2`` pixel coordinates ``(u, v)``.
    :param camera_dirs: ``K x 3`` unit ray directions in camera coordinates.
    :param classes: :class:`RayClass` of each ray.
    :param rgb: ``K x 3`` ground-truth colors (used by positive rays).
    :param depth: ``K`` ground-truth distances (used by positive rays).
    """

    target: ObjectSpec
    frame_index: npt.NDArray[np.int64]
    pixels: npt.NDArray[np.int64]
    camera_dirs: npt.NDArray[np.float64]
    classes: npt.NDArray[np.int8]
    rgb: npt.NDArray[np.float32]
    depth: npt.NDArray[np.float32]
    n_masked: int
    n_dropped: int

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.classes == RayClass.POSITIVE))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.classes == RayClass.NEGATIVE))

    def __len__(self) -> int:
        return int(self.classes.shape[0])

    def select(self, ray_class: RayClass) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.classes == ray_class)

    def pixel(self, k: int) -> ClassifiedPixel:
        cls = RayClass(int(self.classes[k]))
        positive = cls == RayClass.POSITIVE
        return ClassifiedPixel(
            frame_index=int(self.frame_index[k]),
            u=int(self.pixels[k, 0]),
            v=int(self.pixels[k, 1]),
            ray_class=cls,
            gt_color=tuple(self.rgb[k].tolist()) if positive else None,  # type: ignore
            gt_depth=float(self.depth[k]) if positive else None,
        )

    def __iter__(self) -> Iterator[ClassifiedPixel]:
        for k in range(len(self)):
            yield self.pixel(k)

    def counts(self) -> Dict[str, int]:
        return {
            "positive": self.n_positive,
            "negative": self.n_negative,
            "masked": self.n_masked,
            "dropped": self.n_dropped,
        }


def build_ray_index(dataset: SceneDataset, target: Union[ObjectSpec, int, str]) -> RayIndex:
    if not isinstance(target, ObjectSpec):
        target = dataset.find_object(target)
    intr = dataset.intrinsics
    us, vs = pixel_grid(intr)
    d_cam = camera_directions(intr, us, vs, torch.float64).numpy()
    pixels = np.stack([us.numpy(), vs.numpy()], axis=-1).astype(np.int64)

    frame_index: List[npt.NDArray[np.int64]] = []
    keep_pixels: List[npt.NDArray[np.int64]] = []
    dirs: List[npt.NDArray[np.float64]] = []
    classes: List[npt.NDArray[np.int8]] = []
    rgb: List[npt.NDArray[np.float32]] = []
    depth: List[npt.NDArray[np.float32]] = []
    n_masked = 0
    n_dropped = 0
    for i, frame in enumerate(dataset.frames):
        fc = classify_frame(frame, intr, target, dataset.objects)
        flat_classes = fc.classes.reshape(-1)
        flat_dropped = fc.dropped.reshape(-1)
        n_dropped += int(flat_dropped.sum())
        n_masked += int(np.sum(~flat_dropped & (flat_classes == RayClass.MASKED)))
        keep = ~flat_dropped & (flat_classes != RayClass.MASKED)
        frame_index.append(np.full(int(keep.sum()), i, dtype=np.int64))
        keep_pixels.append(pixels[keep])
        dirs.append(d_cam[keep])
        classes.append(flat_classes[keep])
        rgb.append(frame.rgb.reshape(-1, 3)[keep])
        depth.append(frame.depth.reshape(-1)[keep])

    index = RayIndex(
        target=target,
        frame_index=np.concatenate(frame_index),
        pixels=np.concatenate(keep_pixels),
        camera_dirs=np.concatenate(dirs),
        classes=np.concatenate(classes),
        rgb=np.concatenate(rgb),
        depth=np.concatenate(depth),
        n_masked=n_masked,
        n_dropped=n_dropped,
    )
    logger.info(f"ray index for {target.name}: {index.counts()}")
    return index
