from .checkpoint import load_field, load_run, save_field, save_run
from .config import (
    EvalConfig,
    ExperimentConfig,
    FieldConfig,
    HashGridConfig,
    OptimizerConfig,
    SweepConfig,
    SynthConfig,
    TrainConfig,
)
from .corruption import MaskNoiseSpec, PoseNoiseSpec, corrupt_dataset
from .datamodel import Pose, SceneDataset, load_dataset, save_dataset
from .evalkit import evaluate, render_object_view
from .experiment import run_experiment
from .hashfield import ObjectField
from .trainer import TrainReport, train

__all__ = [
    "HashGridConfig",
    "FieldConfig",
    "OptimizerConfig",
    "TrainConfig",
    "SynthConfig",
    "EvalConfig",
    "SweepConfig",
    "ExperimentConfig",
    "Pose",
    "SceneDataset",
    "load_dataset",
    "save_dataset",
    "ObjectField",
    "TrainReport",
    "train",
    "MaskNoiseSpec",
    "PoseNoiseSpec",
    "corrupt_dataset",
    "evaluate",
    "render_object_view",
    "run_experiment",
    "save_field",
    "load_field",
    "save_run",
    "load_run",
]
