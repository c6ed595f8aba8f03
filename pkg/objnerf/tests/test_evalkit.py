import numpy as np
import torch

from objnerf.config import EvalConfig, FieldConfig, HashGridConfig
from objnerf.datamodel import CameraIntrinsics, Frame, ObjectSpec, SceneDataset
from objnerf.evalkit import (
    EvalView,
    evaluate,
    evaluate_thresholds,
    pool_metrics,
    render_object_view,
    view_metrics,
    views_from_dataset,
)
from objnerf.hashfield import ObjectField
from objnerf.synthscene import look_at

INTRINSICS = CameraIntrinsics(16, 12, 15.0, 15.0, 8.0, 6.0)
SMALL_FIELD = FieldConfig(
    grid=HashGridConfig(n_levels=2, table_size=2**10, base_resolution=4, finest_resolution=16),
    hidden_width=16,
)


def _view(mask: np.ndarray, depth: np.ndarray) -> EvalView:
    pose = look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
    return EvalView(pose, INTRINSICS, mask, depth.astype(np.float32))


def _square_view() -> EvalView:
    mask = np.zeros((12, 16), dtype=bool)
    mask[3:9, 4:12] = True
    depth = np.where(mask, 0.8, 0.0)
    return _view(mask, depth)


def _transparent_field() -> ObjectField:
    field = ObjectField(SMALL_FIELD, [-0.1, -0.1, -0.1], [0.1, 0.1, 0.1])
    with torch.no_grad():
        for p in field.parameters():
            p.zero_()
    return field


def test_exact_rendering() -> None:
    view = _square_view()
    metrics = view_metrics(view.depth.copy(), view.mask.copy(), view)
    assert metrics.depth_mae == 0.0
    assert metrics.iou == 1.0
    assert metrics.n_correct_pixels == 48


def test_empty_rendered_mask() -> None:
    view = _square_view()
    metrics = view_metrics(np.zeros_like(view.depth), np.zeros_like(view.mask), view)
    assert metrics.iou == 0.0
    assert metrics.depth_mae is None
    assert pool_metrics([metrics]).depth_mae is None


def test_constant_depth_bias() -> None:
    view = _square_view()
    metrics = view_metrics(view.depth + np.float32(0.01), view.mask, view)
    assert metrics.depth_mae is not None
    assert abs(metrics.depth_mae - 0.01) < 1e-6


def test_invalid_ground_truth_depth_is_skipped() -> None:
    view = _square_view()
    depth = view.depth.copy()
    depth[3, 4] = 0.0
    partial = _view(view.mask, depth)
    metrics = view_metrics(view.depth + np.float32(0.5), view.mask, partial)
    assert metrics.n_correct_pixels == 47
    assert metrics.iou == 1.0


def test_pooled_iou() -> None:
    view = _square_view()
    half = view.mask.copy()
    half[:, 8:] = False
    first = view_metrics(view.depth, half, view)
    second = view_metrics(view.depth, view.mask, view)
    assert first.iou == 0.5
    pooled = pool_metrics([first, second])
    # Pooled over pixels: (24 + 48) / (48 + 48), not the mean of the per-view values.
    assert pooled.iou == 0.75
    assert pooled.n_correct_pixels == 72
    assert pooled.depth_mae is not None and abs(pooled.depth_mae) < 1e-7
    assert len(pooled.to_json()["per_view"]) == 2  # type: ignore


def test_transparent_field_renders_background() -> None:
    field = _transparent_field()
    pose = look_at([0.0, 0.0, 0.6], [0.0, 0.0, 0.0])
    depth, mask, rgb = render_object_view(field, pose, INTRINSICS)
    assert not mask.any()
    assert np.all(depth == 0)
    assert rgb.shape == (12, 16, 3)


def test_evaluate_transparent_field() -> None:
    view = _square_view()
    field = _transparent_field()
    record = evaluate(field, [view, view], EvalConfig(n_samples=16))
    assert record.iou == 0.0
    assert record.depth_mae is None
    assert len(record.per_view) == 2

    low, high = evaluate_thresholds(field, [view], [0.01, 0.99], EvalConfig(n_samples=16))
    # Every ray through the box has nonzero opacity.
    assert low.iou > 0.0
    assert high.iou == 0.0


def test_views_from_dataset() -> None:
    view = _square_view()
    mask = view.mask.astype(np.uint8) * 3
    frame = Frame(np.zeros((12, 16, 3), dtype=np.float32), view.depth, mask, view.pose)
    ds = SceneDataset(INTRINSICS, [frame], [ObjectSpec(3, "cup", np.zeros(3), np.ones(3))])
    (converted,) = views_from_dataset(ds, 3)
    assert np.array_equal(converted.mask, view.mask)
    moved = look_at([0.0, 0.5, 1.0], [0.0, 0.0, 0.0])
    (from_pose,) = views_from_dataset(ds, 3, [moved])
    assert from_pose.pose is moved
