import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Type, TypeVar

T = TypeVar("T")


@dataclass
class HashGridConfig:
    """Multiresolution hash grid settings.

    :param n_levels: Number of resolution levels.
    :param table_size: Number of feature entries per level.
    :param features_per_entry: Number of learnable features stored in each entry.
    :param base_resolution: Grid cells per axis at the coarsest level.
    :param finest_resolution: Grid cells per axis at the finest level.
    """

    n_levels: int = 16
    table_size: int = 2**19
    features_per_entry: int = 2
    base_resolution: int = 16
    finest_resolution: int = 2048

    def growth_factor(self) -> float:
        if self.n_levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution))
            / (self.n_levels - 1)
        )

    def resolutions(self) -> List[int]:
        b = self.growth_factor()
        return [
            int(math.floor(self.base_resolution * b**level + 1e-9))
            for level in range(self.n_levels)
        ]


@dataclass
class FieldConfig:
    """Per-object radiance field architecture.

    :param grid: Hash grid encoding settings.
    :param hidden_width: Width of the hidden layers of both MLPs.
    :param density_layers: Number of hidden layers of the density MLP.
    :param color_layers: Number of hidden layers of the color MLP.
    :param latent_dim: Number of density MLP outputs passed on to the color MLP (excluding the density itself).
    :param sh_degree: Number of spherical harmonics bands used to encode the view direction (1-4).
    :param max_log_density: Raw density outputs are clamped to this value before exponentiation.
    :param grid_init_scale: Grid features are initialized uniformly in ``[-grid_init_scale, grid_init_scale]``.
    """

    grid: HashGridConfig = field(default_factory=HashGridConfig)
    hidden_width: int = 64
    density_layers: int = 1
    color_layers: int = 2
    latent_dim: int = 15
    sh_degree: int = 4
    max_log_density: float = 12.0
    grid_init_scale: float = 1e-4


@dataclass
class OptimizerConfig:
    """Adam settings for field parameters and camera poses.

    :param field_lr: Constant learning rate of the field parameters.
    :param pose_lr_start: Learning rate of the pose increments at the first step.
    :param pose_lr_end: Learning rate of the pose increments at the last step (decayed exponentially).
    :param beta1: Adam first moment decay.
    :param beta2: Adam second moment decay.
    :param eps: Adam denominator epsilon.
    """

    field_lr: float = 1e-2
    pose_lr_start: float = 3.3e-4
    pose_lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-9


@dataclass
class TrainConfig:
    """Training settings for a single object field.

    :param field: Field architecture.
    :param optim: Optimizer settings.
    :param n_steps: Number of optimizer steps.
    :param rays_per_batch: Number of rays sampled from the positive and negative sets per step.
    :param n_samples_per_ray: Number of quadrature samples along each ray.
    :param w_depth: Weight of the depth loss.
    :param use_depth: Enable the transmittance-gated depth loss.
    :param optimize_extrinsics: Jointly optimize the camera poses.
    :param neg_ratio: Fraction of each batch drawn from negative rays. If not set, rays are drawn uniformly from the union of positive and negative rays.
    :param composite_background: Composite a per-ray random background color into the rendered training color.
    :param seed: Seed of the training random stream.
    :param log_interval: Echo losses every ``log_interval`` steps (0 disables).
    :param log_dir: Write TensorBoard scalars to this directory.
    :param track: Track experiment metrics with Weights and Biases.
    :param wandb_project_name: Name of the W&B project to log metrics to.
    :param wandb_entity: The entity (team) of the W&B project to log metrics to.
    """

    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    optim: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    n_steps: int = 2000
    rays_per_batch: int = 1024
    n_samples_per_ray: int = 64
    w_depth: float = 3.0
    use_depth: bool = False
    optimize_extrinsics: bool = False
    neg_ratio: Optional[float] = None
    composite_background: bool = True
    seed: int = 1
    log_interval: int = 100
    log_dir: Optional[str] = None
    track: bool = False
    wandb_project_name: str = "objnerf"
    wandb_entity: Optional[str] = None

    def __post_init__(self) -> None:
        assert self.n_steps >= 0, f"n_steps must be non-negative, got {self.n_steps}"
        assert self.rays_per_batch > 0 and self.n_samples_per_ray > 0, (
            "Ray and sample counts must be positive: "
            f"{self.rays_per_batch} rays, {self.n_samples_per_ray} samples"
        )
        assert self.optim.pose_lr_end <= self.optim.pose_lr_start, (
            "pose_lr_end must not exceed pose_lr_start: "
            f"{self.optim.pose_lr_end} > {self.optim.pose_lr_start}"
        )
        assert self.neg_ratio is None or 0.0 <= self.neg_ratio <= 1.0

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(rays_per_batch=4096, n_samples_per_ray=128)


@dataclass
class SynthConfig:
    """Synthetic dataset settings.

    :param width: Image width in pixels.
    :param height: Image height in pixels.
    :param fov_deg: Horizontal field of view.
    :param n_views: Number of training views.
    :param radius: Distance of the cameras from the trajectory center in meters.
    :param trajectory: Either ``hemisphere`` or ``arc``.
    :param min_elevation_deg: Lowest camera elevation above the trajectory center (hemisphere).
    :param max_elevation_deg: Highest camera elevation above the trajectory center (hemisphere).
    :param elevation_deg: Mean camera elevation of ``arc`` trajectories.
    :param elevation_range_deg: Spread of camera elevations of ``arc`` trajectories.
    :param azimuth_range_deg: Azimuth covered by ``arc`` trajectories.
    :param looseness: Scale factor applied to tight object bounds to obtain the loose bounding boxes.
    :param n_test_views: Number of held-out evaluation views.
    """

    width: int = 160
    height: int = 120
    fov_deg: float = 40.0
    n_views: int = 30
    radius: float = 0.6
    trajectory: str = "hemisphere"
    min_elevation_deg: float = 15.0
    max_elevation_deg: float = 80.0
    elevation_deg: float = 30.0
    elevation_range_deg: float = 0.0
    azimuth_range_deg: float = 180.0
    looseness: float = 1.25
    n_test_views: int = 50

    @classmethod
    def full_scale(cls) -> "SynthConfig":
        return cls(width=640, height=480)


@dataclass
class EvalConfig:
    """Evaluation settings.

    :param n_samples: Number of midpoint samples per rendered ray.
    :param opacity_threshold: Pixels with opacity above this value belong to the rendered mask.
    :param normalize_depth: Divide the expected depth by the opacity before comparing against ground truth.
    :param chunk_size: Number of rays rendered at once.
    """

    n_samples: int = 128
    opacity_threshold: float = 0.5
    normalize_depth: bool = True
    chunk_size: int = 8192


@dataclass
class SweepConfig:
    """Axes of an experiment sweep. Every combination of values is run.

    :param n_images: Number of training views.
    :param radius: Camera distance in meters.
    :param mask_iou: Target IoU of the corrupted instance masks (1.0 keeps the ideal masks).
    :param sigma_t: Translation noise standard deviation in meters.
    :param sigma_r_deg: Rotation noise standard deviation in degrees.
    :param use_depth: Depth supervision settings to run.
    :param optimize_extrinsics: Extrinsics optimization settings to run.
    """

    n_images: List[int] = field(default_factory=lambda: [30])
    radius: List[float] = field(default_factory=lambda: [0.6])
    mask_iou: List[float] = field(default_factory=lambda: [1.0])
    sigma_t: List[float] = field(default_factory=lambda: [0.0])
    sigma_r_deg: List[float] = field(default_factory=lambda: [0.0])
    use_depth: List[bool] = field(default_factory=lambda: [False])
    optimize_extrinsics: List[bool] = field(default_factory=lambda: [False])


@dataclass
class ExperimentConfig:
    """Experiment sweep settings.

    :param name: Name of the experiment, written to every results row.
    :param sweep: Sweep axes.
    :param train: Training settings shared by all cells.
    :param synth: Dataset synthesis settings shared by all cells.
    :param eval: Evaluation settings.
    :param objects: Names of the objects to reconstruct.
    :param scene: Built-in scene name or scene JSON file shared by all cells. If not set, every
        built-in object in ``objects`` is reconstructed from a scene holding only that object.
    :param repeats: Number of seeds per cell.
    :param base_seed: Seed of the first repeat; repeat ``k`` uses ``base_seed + k``.
    :param workers: Number of cells run in parallel. Defaults to ``OBJNERF_THREADS`` or 1.
    :param out_dir: Directory receiving datasets, run directories, ``results.csv`` and plots.
    """

    name: str = "baseline"
    sweep: SweepConfig = field(default_factory=SweepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    objects: List[str] = field(default_factory=lambda: ["ball", "book", "laptop", "cup"])
    scene: Optional[str] = None
    repeats: int = 3
    base_seed: int = 0
    workers: Optional[int] = None
    out_dir: str = "experiments"

    def __post_init__(self) -> None:
        assert self.repeats >= 1, f"repeats must be at least 1, got {self.repeats}"
        for axis in (
            "n_images",
            "radius",
            "mask_iou",
            "sigma_t",
            "sigma_r_deg",
            "use_depth",
            "optimize_extrinsics",
        ):
            assert len(getattr(self.sweep, axis)) > 0, f"Sweep axis {axis} is empty"
        assert len(self.objects) > 0, "No objects to reconstruct"


def default_threads() -> int:
    return int(os.environ.get("OBJNERF_THREADS", "1"))


def from_dict(cls: Type[T], values: Dict[str, Any]) -> T:
    """Rebuilds a (nested) config dataclass from the output of ``dataclasses.asdict``."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):  # type: ignore
        if f.name not in values:
            continue
        value = values[f.name]
        if dataclasses.is_dataclass(hints[f.name]) and isinstance(value, dict):
            value = from_dict(hints[f.name], value)
        kwargs[f.name] = value
    return cls(**kwargs)  # type: ignore


def apply_preset(cfg: T, preset: T) -> T:
    """Takes every field of ``preset`` that differs from the defaults unless ``cfg`` already overrides it."""
    default = type(cfg)()
    changes = {
        f.name: getattr(preset, f.name)
        for f in dataclasses.fields(cfg)  # type: ignore
        if getattr(cfg, f.name) == getattr(default, f.name)
        and getattr(preset, f.name) != getattr(default, f.name)
    }
    return dataclasses.replace(cfg, **changes)  # type: ignore
