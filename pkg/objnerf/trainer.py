"""
Joint optimization of an object field and, optionally, the camera poses.
"""
import csv
import dataclasses
import logging
import os
import random
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import click
import numpy as np
import torch
import torch.nn as nn
from torch.utils.tensorboard import SummaryWriter

from objnerf.config import TrainConfig
from objnerf.datamodel import ObjectSpec, Pose, Rng, SceneDataset
from objnerf.errors import DivergenceError
from objnerf.hashfield import ObjectField, check_parameters
from objnerf.isolation import RayClass, RayIndex, build_ray_index
from objnerf.optim import AnnealedAdam, decay_factor
from objnerf.volrender import RenderResult, intersect_aabb, render_rays

logger = logging.getLogger(__name__)

DEPTH_GATE_TRANSMITTANCE = 1e-4


def _skew(w: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
            torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
            torch.stack([-w[..., 1], w[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    """Rotation matrices of axis-angle vectors ``w`` (``... x 3``)."""
    return torch.linalg.matrix_exp(_skew(w))


class PoseParams(nn.Module):
    """
    Camera poses as fixed base poses plus learnable tangent increments.

    Row ``i`` of ``tangent`` holds a world-frame rotation increment (axis-angle, radians)
    left-multiplied onto the base rotation, followed by a translation increment added to the
    camera center (meters).
    """

    def __init__(self, poses: Sequence[Pose]):
        super().__init__()
        self.base: List[Pose] = list(poses)
        self.register_buffer("base_rotations", torch.zeros(len(poses), 3, 3, dtype=torch.float64))
        self.register_buffer("base_translations", torch.zeros(len(poses), 3, dtype=torch.float64))
        self.tangent = nn.Parameter(torch.zeros(len(poses), 6, dtype=torch.float64))
        self._sync()

    def _sync(self) -> None:
        self.base_rotations.copy_(
            torch.as_tensor(np.stack([p.rotation_matrix() for p in self.base]))
        )
        self.base_translations.copy_(
            torch.as_tensor(np.stack([p.translation for p in self.base]))
        )

    def rotations(self, frame_index: torch.Tensor) -> torch.Tensor:
        return so3_exp(self.tangent[frame_index, :3]) @ self.base_rotations[frame_index]

    def centers(self, frame_index: torch.Tensor) -> torch.Tensor:
        return self.base_translations[frame_index] + self.tangent[frame_index, 3:]

    @torch.no_grad()
    def fold(self) -> None:
        """Folds the increments into the base poses and resets them to zero."""
        everything = torch.arange(len(self.base))
        rotations = self.rotations(everything).numpy()
        centers = self.centers(everything).numpy()
        self.base = [Pose.from_rotation_matrix(r, t) for r, t in zip(rotations, centers)]
        self._sync()
        self.tangent.zero_()

    def poses(self) -> List[Pose]:
        if not bool(torch.any(self.tangent != 0)):
            return list(self.base)
        everything = torch.arange(len(self.base))
        with torch.no_grad():
            rotations = self.rotations(everything).numpy()
            centers = self.centers(everything).numpy()
        return [Pose.from_rotation_matrix(r, t) for r, t in zip(rotations, centers)]


def rgb_residual(
    classes: torch.Tensor,
    rendered: torch.Tensor,
    gt: torch.Tensor,
    rng: Rng,
    transmittance: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Photometric residuals of a batch of rays.

    Positive rays are compared against their pixel color, negative rays against a fresh
    uniformly random color and masked rays have zero residual. With ``transmittance`` the
    random color is additionally composited behind every rendered ray.
    """
    random_colors = torch.as_tensor(
        rng.uniform((classes.shape[0], 3)), dtype=rendered.dtype, device=rendered.device
    )
    color = rendered
    if transmittance is not None:
        color = rendered + transmittance[:, None] * random_colors
    positive = (classes == RayClass.POSITIVE)[:, None]
    negative = (classes == RayClass.NEGATIVE)[:, None]
    target = torch.where(positive, gt.to(rendered.dtype), random_colors)
    return torch.where(positive | negative, color - target, torch.zeros_like(color))


def depth_residual(
    classes: torch.Tensor,
    depth: torch.Tensor,
    transmittance: torch.Tensor,
    gt_depth: torch.Tensor,
) -> torch.Tensor:
    """``|D - d_gt|`` for positive rays that are opaque and have valid ground truth, 0 otherwise."""
    gate = (
        (classes == RayClass.POSITIVE)
        & (transmittance.detach() < DEPTH_GATE_TRANSMITTANCE)
        & (gt_depth > 0)
    )
    return torch.where(gate, (depth - gt_depth.to(depth.dtype)).abs(), torch.zeros_like(depth))


@dataclass
class TraceRow:
    step: int
    loss_rgb: float
    loss_depth: float
    pose_lr: float


@dataclass
class TrainReport:
    field: ObjectField
    poses: List[Pose]
    trace: List[TraceRow] = dataclasses.field(default_factory=list)
    wall_time: float = 0.0
    counts: Dict[str, int] = dataclasses.field(default_factory=dict)

    def write_trace(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss_rgb", "loss_depth", "pose_lr"])
            for row in self.trace:
                writer.writerow([row.step, repr(row.loss_rgb), repr(row.loss_depth), repr(row.pose_lr)])


@dataclass
class RayBatch:
    rays: torch.Tensor
    frame_index: torch.Tensor
    classes: torch.Tensor
    rgb: torch.Tensor
    depth: torch.Tensor


def sample_batch(index: RayIndex, cfg: TrainConfig, rng: Rng) -> RayBatch:
    """Draws ``rays_per_batch`` training rays, uniformly over the union of positive and negative rays unless ``neg_ratio`` is set."""
    n = cfg.rays_per_batch
    if cfg.neg_ratio is None:
        rays = rng.integers(0, len(index), n)
    else:
        positives = index.select(RayClass.POSITIVE)
        negatives = index.select(RayClass.NEGATIVE)
        n_neg = int(round(n * cfg.neg_ratio))
        if len(positives) == 0:
            n_neg = n
        elif len(negatives) == 0:
            n_neg = 0
        n_pos = n - n_neg
        rays = np.concatenate(
            [
                positives[rng.integers(0, max(len(positives), 1), n_pos)],
                negatives[rng.integers(0, max(len(negatives), 1), n_neg)],
            ]
        )
    rays_t = torch.as_tensor(rays, dtype=torch.int64)
    return RayBatch(
        rays=rays_t,
        frame_index=torch.as_tensor(index.frame_index[rays]),
        classes=torch.as_tensor(index.classes[rays]),
        rgb=torch.as_tensor(index.rgb[rays]),
        depth=torch.as_tensor(index.depth[rays]),
    )


def render_batch(
    field: ObjectField,
    poses: PoseParams,
    index: RayIndex,
    batch: RayBatch,
    n_samples: int,
    rng: Optional[Rng],
) -> Dict[str, Any]:
    """
    Renders a batch of training rays from the current poses.

    Ray geometry stays in float64 up to the sample positions, and the box distances are
    differentiated along with the rays so pose gradients are exact.
    """
    d_cam = torch.as_tensor(index.camera_dirs[batch.rays.numpy()], dtype=torch.float64)
    rotations = poses.rotations(batch.frame_index)
    directions = (rotations @ d_cam[..., None])[..., 0]
    origins = poses.centers(batch.frame_index)
    aabb_min, aabb_max = field.aabb
    t_near, t_far, hit = intersect_aabb(origins, directions, aabb_min, aabb_max)
    dtype = field.encoding.embeddings.dtype
    result = render_rays(
        field, origins, directions, t_near, t_far, hit, n_samples, rng, dtype=dtype
    )
    return {"result": result, "valid": hit}


def batch_loss(
    result: RenderResult,
    valid: torch.Tensor,
    batch: RayBatch,
    cfg: TrainConfig,
    rng: Rng,
) -> Dict[str, torch.Tensor]:
    transmittance = result.transmittance if cfg.composite_background else None
    e_rgb = rgb_residual(batch.classes, result.color, batch.rgb, rng, transmittance)
    per_ray = torch.where(valid, e_rgb.norm(dim=-1), torch.zeros_like(result.depth))
    n = float(batch.classes.shape[0])
    loss_rgb = per_ray.sum() / n
    if cfg.use_depth:
        e_depth = depth_residual(batch.classes, result.depth, result.transmittance, batch.depth)
        loss_depth = torch.where(valid, e_depth, torch.zeros_like(e_depth)).sum() / n
    else:
        loss_depth = torch.zeros((), dtype=loss_rgb.dtype)
    return {
        "loss": loss_rgb + cfg.w_depth * loss_depth,
        "rgb": loss_rgb,
        "depth": loss_depth,
    }


def _flatten(config: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flattened = {}
    for k, v in config.items():
        if isinstance(v, dict):
            flattened.update(_flatten(v, k if prefix == "" else f"{prefix}.{k}"))
        else:
            flattened[f"{prefix}.{k}" if prefix else k] = v
    return flattened


def _echo_progress(
    step: int, cfg: TrainConfig, row: TraceRow, rays_per_second: float
) -> None:
    def green(s: str) -> str:
        return click.style(s, fg="cyan")

    def estyle(f: float) -> str:
        return click.style(f"{f:.2e}", fg="cyan")

    def symstyle(s: str) -> str:
        return click.style(s, fg="white", bold=True)

    digits = len(str(cfg.n_steps))
    # fmt: off
    click.echo(
        green(f"{step:>{digits}}") + symstyle("/") + green(f"{cfg.n_steps} ")
        + f"{symstyle('|')} loss_rgb {estyle(row.loss_rgb)} "
        + f"{symstyle('|')} loss_depth {estyle(row.loss_depth)} "
        + f"{symstyle('|')} pose_lr {estyle(row.pose_lr)} "
        + f"{symstyle('|')} rays/s {green(str(int(rays_per_second)))}"
    )
    # fmt: on


def train(
    dataset: SceneDataset,
    target: Union[ObjectSpec, int, str],
    cfg: TrainConfig,
    index: Optional[RayIndex] = None,
    run_name: Optional[str] = None,
) -> TrainReport:
    """
    Fits a field to one object of ``dataset`` and, if ``optimize_extrinsics`` is set, refines the
    camera poses alongside it.

    :param dataset: Training images, masks and initial poses.
    :param target: The object to reconstruct, by spec, id or name.
    :param cfg: Training settings.
    :param index: Precomputed ray classification of ``dataset`` for ``target``.
    :param run_name: Name of the TensorBoard and W&B run.
    """
    if not isinstance(target, ObjectSpec):
        target = dataset.find_object(target)
    if index is None:
        index = build_ray_index(dataset, target)
    assert len(index) > 0, f"No training rays for object {target.name}"

    random.seed(cfg.seed)
    np.random.seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    rng = Rng(cfg.seed).fork("train")

    field = ObjectField(cfg.field, target.aabb_min, target.aabb_max)
    poses = PoseParams([f.pose for f in dataset.frames])
    groups: List[Dict[str, Any]] = [
        {"params": list(field.parameters()), "lr": cfg.optim.field_lr, "lr_decay": 1.0}
    ]
    if cfg.optimize_extrinsics:
        groups.append(
            {
                "params": [poses.tangent],
                "lr": cfg.optim.pose_lr_start,
                "lr_decay": decay_factor(
                    cfg.optim.pose_lr_start, cfg.optim.pose_lr_end, cfg.n_steps
                ),
            }
        )
    optimizer = AnnealedAdam(
        groups, betas=(cfg.optim.beta1, cfg.optim.beta2), eps=cfg.optim.eps
    )

    run_name = run_name or f"{target.name}__{cfg.seed}__{int(time.time())}"
    writer: Optional[SummaryWriter] = None
    if cfg.log_dir is not None:
        writer = SummaryWriter(os.path.join(cfg.log_dir, run_name))
        writer.add_text(
            "hyperparameters",
            "|param|value|\n|-|-|\n%s"
            % "\n".join(f"|{key}|{value}|" for key, value in _flatten(asdict(cfg)).items()),
        )
    if cfg.track:
        import wandb

        wandb.init(
            project=cfg.wandb_project_name,
            entity=cfg.wandb_entity,
            sync_tensorboard=writer is not None,
            config=asdict(cfg),
            name=run_name,
        )

    report = TrainReport(field=field, poses=[], counts=index.counts())
    start_time = time.time()
    for step in range(cfg.n_steps):
        pose_lr = optimizer.param_groups[1]["lr"] if cfg.optimize_extrinsics else 0.0
        batch = sample_batch(index, cfg, rng)
        rendered = render_batch(field, poses, index, batch, cfg.n_samples_per_ray, rng)
        losses = batch_loss(rendered["result"], rendered["valid"], batch, cfg, rng)
        if not torch.isfinite(losses["loss"]):
            raise DivergenceError("training diverged", step)

        optimizer.zero_grad()
        losses["loss"].backward()
        optimizer.step()
        if cfg.optimize_extrinsics:
            poses.fold()

        row = TraceRow(step, losses["rgb"].item(), losses["depth"].item(), pose_lr)
        report.trace.append(row)
        if writer is not None:
            writer.add_scalar("losses/rgb", row.loss_rgb, step)
            writer.add_scalar("losses/depth", row.loss_depth, step)
            writer.add_scalar("charts/pose_lr", pose_lr, step)
            writer.add_scalar("charts/field_lr", optimizer.param_groups[0]["lr"], step)
        if cfg.log_interval > 0 and (step + 1) % cfg.log_interval == 0:
            rays_per_second = (step + 1) * cfg.rays_per_batch / (time.time() - start_time)
            _echo_progress(step + 1, cfg, row, rays_per_second)
            if writer is not None:
                writer.add_scalar("charts/rays_per_second", rays_per_second, step)

    check_parameters(field, cfg.n_steps)
    report.poses = poses.poses()
    report.wall_time = time.time() - start_time
    if writer is not None:
        writer.close()
    if cfg.track:
        import wandb

        wandb.finish()
    return report
