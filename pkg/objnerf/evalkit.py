"""
Geometric evaluation of a trained object field: rendered masks against ideal instance masks
(IoU) and rendered depth against ground truth over correctly categorized pixels (MAE).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import torch
from tqdm import tqdm

from objnerf.config import EvalConfig
from objnerf.datamodel import CameraIntrinsics, Pose, SceneDataset
from objnerf.hashfield import ObjectField
from objnerf.volrender import image_rays, intersect_aabb, render_rays

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EvalView:
    """
    :param mask: ``H x W`` ideal instance mask of the evaluated object.
    :param depth: ``H x W`` ground-truth distances along the pixel rays, 0 where invalid.
    """

    pose: Pose
    intrinsics: CameraIntrinsics
    mask: npt.NDArray[np.bool_]
    depth: npt.NDArray[np.float32]

    def __post_init__(self) -> None:
        shape = (self.intrinsics.height, self.intrinsics.width)
        assert self.mask.shape == shape and self.depth.shape == shape, (
            f"View rasters {self.mask.shape}, {self.depth.shape} do not match {shape}"
        )


def views_from_dataset(
    ds: SceneDataset, object_id: int, poses: Optional[Sequence[Pose]] = None
) -> List[EvalView]:
    """Evaluation views of ``object_id`` from the frames of ``ds``, optionally rendered from ``poses``."""
    if poses is None:
        poses = [f.pose for f in ds.frames]
    assert len(poses) == len(ds.frames), f"Expected {len(ds.frames)} poses, got {len(poses)}"
    return [
        EvalView(pose, ds.intrinsics, frame.mask == object_id, frame.depth)
        for frame, pose in zip(ds.frames, poses)
    ]


@dataclass
class ObjectRender:
    """
    Raw rendering of a field from one view.

    :param opacity: ``H x W`` accumulated opacity, 0 for rays that miss the box.
    :param expected_depth: ``H x W`` expected distance (not normalized).
    :param rgb: ``H x W x 3`` expected color.
    """

    opacity: npt.NDArray[np.float32]
    expected_depth: npt.NDArray[np.float32]
    rgb: npt.NDArray[np.float32]

    def mask(self, threshold: float = 0.5) -> npt.NDArray[np.bool_]:
        return self.opacity > threshold  # type: ignore

    def depth(self, threshold: float = 0.5, normalize: bool = True) -> npt.NDArray[np.float32]:
        mask = self.mask(threshold)
        depth = np.zeros_like(self.expected_depth)
        if normalize:
            depth[mask] = self.expected_depth[mask] / self.opacity[mask]
        else:
            depth[mask] = self.expected_depth[mask]
        return depth


@torch.no_grad()
def render_view(
    field: ObjectField, pose: Pose, intrinsics: CameraIntrinsics, cfg: EvalConfig
) -> ObjectRender:
    dtype = field.encoding.embeddings.dtype
    origins, directions = image_rays(intrinsics, pose)
    aabb_min, aabb_max = field.aabb
    opacity = []
    depth = []
    rgb = []
    for start in range(0, origins.shape[0], cfg.chunk_size):
        o = origins[start : start + cfg.chunk_size]
        d = directions[start : start + cfg.chunk_size]
        t_near, t_far, hit = intersect_aabb(o, d, aabb_min, aabb_max)
        result = render_rays(field, o, d, t_near, t_far, hit, cfg.n_samples, dtype=dtype)
        opacity.append(torch.where(hit, result.opacity, torch.zeros_like(result.opacity)))
        depth.append(result.depth)
        rgb.append(result.color)
    shape = (intrinsics.height, intrinsics.width)
    return ObjectRender(
        opacity=torch.cat(opacity).reshape(shape).float().numpy(),
        expected_depth=torch.cat(depth).reshape(shape).float().numpy(),
        rgb=torch.cat(rgb).reshape(shape + (3,)).float().numpy(),
    )


def render_object_view(
    field: ObjectField,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    cfg: Optional[EvalConfig] = None,
) -> Tuple[npt.NDArray[np.float32], npt.NDArray[np.bool_], npt.NDArray[np.float32]]:
    """Returns the rendered ``(depth, mask, rgb)`` rasters of ``field`` seen from ``pose``."""
    cfg = cfg or EvalConfig()
    render = render_view(field, pose, intrinsics, cfg)
    return (
        render.depth(cfg.opacity_threshold, cfg.normalize_depth),
        render.mask(cfg.opacity_threshold),
        render.rgb,
    )


@dataclass
class ViewMetrics:
    depth_mae: Optional[float]
    iou: float
    n_correct_pixels: int
    intersection: int
    union: int
    abs_error_sum: float


@dataclass
class MetricsRecord:
    """
    :param depth_mae: Mean absolute depth error over pixels in both the rendered and the ideal mask, ``None`` if there are none.
    :param iou: Pooled IoU of rendered and ideal masks over all views.
    """

    depth_mae: Optional[float]
    iou: float
    n_correct_pixels: int
    per_view: List[ViewMetrics] = field(default_factory=list)

    def to_json(self) -> Dict[str, object]:
        return {
            "depth_mae": self.depth_mae,
            "iou": self.iou,
            "n_correct_pixels": self.n_correct_pixels,
            "per_view": [
                {"depth_mae": v.depth_mae, "iou": v.iou, "n_correct_pixels": v.n_correct_pixels}
                for v in self.per_view
            ],
        }


def view_metrics(
    depth: npt.NDArray[np.float32], mask: npt.NDArray[np.bool_], view: EvalView
) -> ViewMetrics:
    correct = mask & view.mask & (view.depth > 0)
    n_correct = int(correct.sum())
    abs_error = float(
        np.abs(depth[correct].astype(np.float64) - view.depth[correct].astype(np.float64)).sum()
    )
    intersection = int(np.sum(mask & view.mask))
    union = int(np.sum(mask | view.mask))
    return ViewMetrics(
        depth_mae=abs_error / n_correct if n_correct > 0 else None,
        iou=intersection / union if union > 0 else 1.0,
        n_correct_pixels=n_correct,
        intersection=intersection,
        union=union,
        abs_error_sum=abs_error,
    )


def pool_metrics(per_view: List[ViewMetrics]) -> MetricsRecord:
    n_correct = sum(v.n_correct_pixels for v in per_view)
    intersection = sum(v.intersection for v in per_view)
    union = sum(v.union for v in per_view)
    return MetricsRecord(
        depth_mae=sum(v.abs_error_sum for v in per_view) / n_correct if n_correct > 0 else None,
        iou=intersection / union if union > 0 else 1.0,
        n_correct_pixels=n_correct,
        per_view=per_view,
    )


def evaluate_thresholds(
    field: ObjectField,
    views: Sequence[EvalView],
    thresholds: Sequence[float],
    cfg: Optional[EvalConfig] = None,
    progress: bool = False,
) -> List[MetricsRecord]:
    """Renders every view once and scores it at each opacity threshold."""
    assert len(views) >= 1, "Evaluation needs at least one view"
    cfg = cfg or EvalConfig()
    per_threshold: List[List[ViewMetrics]] = [[] for _ in thresholds]
    for view in tqdm(views, desc="eval", disable=not progress, leave=False):
        render = render_view(field, view.pose, view.intrinsics, cfg)
        for metrics, threshold in zip(per_threshold, thresholds):
            metrics.append(
                view_metrics(
                    render.depth(threshold, cfg.normalize_depth), render.mask(threshold), view
                )
            )
    return [pool_metrics(m) for m in per_threshold]


def evaluate(
    field: ObjectField,
    views: Sequence[EvalView],
    cfg: Optional[EvalConfig] = None,
    progress: bool = False,
) -> MetricsRecord:
    cfg = cfg or EvalConfig()
    record = evaluate_thresholds(field, views, [cfg.opacity_threshold], cfg, progress)[0]
    logger.info(f"depth MAE {record.depth_mae} IoU {record.iou:.4f} over {len(views)} views")
    return record
