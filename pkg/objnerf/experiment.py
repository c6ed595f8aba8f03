"""
Experiment sweeps: every combination of sweep axes, objects and repeats is synthesized,
corrupted, trained and evaluated against pristine ground truth. Rows go to ``results.csv``,
mean and standard deviation per sweep axis to SVG plots.
"""
import csv
import itertools
import json
import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch
from tqdm import tqdm

from objnerf.checkpoint import RUN_FILE, save_run
from objnerf.config import ExperimentConfig, SynthConfig, apply_preset, default_threads, from_dict
from objnerf.corruption import MaskNoiseSpec, PoseNoiseSpec, corrupt_dataset
from objnerf.datamodel import CameraIntrinsics, Rng, SceneDataset
from objnerf.evalkit import evaluate, views_from_dataset
from objnerf.scenes import resolve_scene, single_object_scene
from objnerf.synthscene import (
    SceneDescription,
    TrajectorySpec,
    make_dataset,
    render_frames,
    sample_trajectory,
)
from objnerf.trainer import train

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
RUNS_DIR = "runs"
RESULT_COLUMNS = [
    "experiment",
    "object",
    "seed",
    "n_images",
    "radius_m",
    "mask_iou_target",
    "sigma_t_m",
    "sigma_r_deg",
    "use_depth",
    "optimize_extrinsics",
    "depth_mae_m",
    "mask_iou",
    "status",
    "wall_s",
]
# Numeric sweep axes that get a plot of their own, keyed by results column.
PLOT_AXES = {
    "n_images": "number of training views",
    "radius_m": "camera distance [m]",
    "mask_iou_target": "mask IoU",
    "sigma_t_m": "translation noise sigma [m]",
    "sigma_r_deg": "rotation noise sigma [deg]",
}
CONDITION_COLUMNS = list(PLOT_AXES) + ["use_depth", "optimize_extrinsics"]
PLOT_METRICS = {"depth_mae_m": "depth MAE [m]", "mask_iou": "rendered mask IoU"}


@dataclass(frozen=True)
class Cell:
    """One training run of a sweep."""

    object_name: str
    seed: int
    n_images: int
    radius: float
    mask_iou: float
    sigma_t: float
    sigma_r_deg: float
    use_depth: bool
    optimize_extrinsics: bool

    @property
    def key(self) -> str:
        return (
            f"{self.object_name}__n{self.n_images}__r{self.radius:g}__m{self.mask_iou:g}"
            f"__t{self.sigma_t:g}__q{self.sigma_r_deg:g}"
            f"__d{int(self.use_depth)}__x{int(self.optimize_extrinsics)}__s{self.seed}"
        )

    @property
    def evaluates_training_views(self) -> bool:
        return self.sigma_t > 0 or self.sigma_r_deg > 0 or self.optimize_extrinsics


def sweep_cells(cfg: ExperimentConfig) -> List[Cell]:
    s = cfg.sweep
    return [
        Cell(
            object_name=name,
            seed=cfg.base_seed + repeat,
            n_images=n_images,
            radius=radius,
            mask_iou=mask_iou,
            sigma_t=sigma_t,
            sigma_r_deg=sigma_r_deg,
            use_depth=use_depth,
            optimize_extrinsics=optimize_extrinsics,
        )
        for (
            n_images,
            radius,
            mask_iou,
            sigma_t,
            sigma_r_deg,
            use_depth,
            optimize_extrinsics,
            name,
            repeat,
        ) in itertools.product(
            s.n_images,
            s.radius,
            s.mask_iou,
            s.sigma_t,
            s.sigma_r_deg,
            s.use_depth,
            s.optimize_extrinsics,
            cfg.objects,
            range(cfg.repeats),
        )
    ]


def trajectory_spec(
    synth: SynthConfig,
    scene: SceneDescription,
    n_views: int,
    radius: Optional[float] = None,
    kind: Optional[str] = None,
) -> TrajectorySpec:
    return TrajectorySpec(
        kind=kind or synth.trajectory,
        radius=synth.radius if radius is None else radius,
        center=tuple(float(c) for c in scene.center()),  # type: ignore
        n_views=n_views,
        elevation_range=math.radians(synth.elevation_range_deg),
        elevation=math.radians(synth.elevation_deg),
        min_elevation=math.radians(synth.min_elevation_deg),
        max_elevation=math.radians(synth.max_elevation_deg),
        azimuth_range=math.radians(synth.azimuth_range_deg),
    )


def scene_setup(
    synth: SynthConfig, scene: str
) -> Tuple[SceneDescription, SynthConfig, CameraIntrinsics]:
    """
    Resolves ``scene`` and lays its stored trajectory and intrinsics under ``synth``.
    Trajectory settings that ``synth`` already changes from the defaults win over the file.
    """
    setup = resolve_scene(scene)
    if setup.trajectory:
        synth = apply_preset(synth, replace(SynthConfig(), **setup.trajectory))
    intrinsics = setup.intrinsics or CameraIntrinsics.from_fov(
        synth.width, synth.height, synth.fov_deg
    )
    return setup.scene, synth, intrinsics


def _test_dataset(
    synth: SynthConfig,
    scene: SceneDescription,
    intrinsics: CameraIntrinsics,
    radius: float,
    train_ds: SceneDataset,
    rng: Rng,
) -> SceneDataset:
    spec = trajectory_spec(synth, scene, synth.n_test_views, radius, "hemisphere")
    frames = render_frames(scene, intrinsics, sample_trajectory(spec, rng))
    return SceneDataset(intrinsics, frames, train_ds.objects)


def _run(cfg: ExperimentConfig, cell: Cell, out_dir: Optional[Path]) -> Dict[str, Any]:
    if cfg.scene is None:
        scene = single_object_scene(cell.object_name)
        synth = cfg.synth
        intrinsics = CameraIntrinsics.from_fov(synth.width, synth.height, synth.fov_deg)
    else:
        scene, synth, intrinsics = scene_setup(cfg.synth, cfg.scene)
    rng = Rng(cell.seed).fork("synth", cell.object_name)
    dataset = make_dataset(
        scene,
        intrinsics,
        trajectory_spec(synth, scene, cell.n_images, cell.radius),
        rng.fork("train"),
        synth.looseness,
    )
    target = dataset.find_object(cell.object_name)

    mask_spec = MaskNoiseSpec(cell.mask_iou, seed=cell.seed) if cell.mask_iou < 1.0 else None
    pose_spec = PoseNoiseSpec(cell.sigma_t, math.radians(cell.sigma_r_deg), seed=cell.seed)
    noisy, corruption = corrupt_dataset(dataset, mask_spec, pose_spec, [target.id])

    train_cfg = replace(
        cfg.train,
        use_depth=cell.use_depth,
        optimize_extrinsics=cell.optimize_extrinsics,
        seed=cell.seed,
    )
    report = train(noisy, target, train_cfg, run_name=f"{cfg.name}__{cell.key}")

    # Ground truth always comes from the pristine frames.
    if cell.evaluates_training_views:
        views = views_from_dataset(dataset, target.id, report.poses)
    else:
        test = _test_dataset(synth, scene, intrinsics, cell.radius, dataset, rng.fork("test"))
        views = views_from_dataset(test, target.id)
    metrics = evaluate(report.field, views, cfg.eval)

    if out_dir is not None:
        save_run(
            report,
            out_dir / RUNS_DIR / cell.key,
            {
                "experiment": cfg.name,
                "config": asdict(cfg),
                "cell": asdict(cell),
                "corruption": corruption.to_json(),
                "depth_mae": metrics.depth_mae,
                "iou": metrics.iou,
            },
        )
    return {"depth_mae_m": metrics.depth_mae, "mask_iou": metrics.iou}


def run_cell(
    cfg: ExperimentConfig, cell: Cell, out_dir: Optional[Union[str, Path]] = None
) -> Dict[str, Any]:
    """
    Runs one cell and returns its results row. Failures are reported in the ``status`` column
    instead of being raised.
    """
    row: Dict[str, Any] = {
        "experiment": cfg.name,
        "object": cell.object_name,
        "seed": cell.seed,
        "n_images": cell.n_images,
        "radius_m": cell.radius,
        "mask_iou_target": cell.mask_iou,
        "sigma_t_m": cell.sigma_t,
        "sigma_r_deg": cell.sigma_r_deg,
        "use_depth": cell.use_depth,
        "optimize_extrinsics": cell.optimize_extrinsics,
        "depth_mae_m": None,
        "mask_iou": None,
        "status": "ok",
    }
    start_time = time.time()
    try:
        row.update(_run(cfg, cell, None if out_dir is None else Path(out_dir)))
    except Exception as e:
        logger.warning(f"cell {cell.key} failed: {e}")
        row["status"] = f"{type(e).__name__}: {e}"
    row["wall_s"] = round(time.time() - start_time, 1)
    return row


def rerun(run_json: Union[str, Path]) -> Dict[str, Any]:
    """Recomputes the results row of a single run from its ``run.json``."""
    path = Path(run_json)
    if path.is_dir():
        path = path / RUN_FILE
    with open(path) as f:
        info = json.load(f)
    cfg = from_dict(ExperimentConfig, info["config"])
    return run_cell(cfg, Cell(**info["cell"]))


def _init_worker() -> None:
    torch.set_num_threads(1)


def run_experiment(cfg: ExperimentConfig, progress: bool = True) -> List[Dict[str, Any]]:
    """
    Runs every cell of the sweep, writing ``results.csv`` in sweep order and one SVG plot per
    swept numeric axis and metric to ``out_dir/name``.
    """
    cells = sweep_cells(cfg)
    out = Path(cfg.out_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    workers = cfg.workers or default_threads()
    logger.info(f"running {len(cells)} cells of {cfg.name} with {workers} workers")

    rows: List[Dict[str, Any]] = []
    with open(out / RESULTS_FILE, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        bar = tqdm(total=len(cells), desc=cfg.name, disable=not progress)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as executor:
                futures = [executor.submit(run_cell, cfg, cell, out) for cell in cells]
                for future in futures:
                    rows.append(future.result())
                    writer.writerow(rows[-1])
                    f.flush()
                    bar.update()
        else:
            for cell in cells:
                rows.append(run_cell(cfg, cell, out))
                writer.writerow(rows[-1])
                f.flush()
                bar.update()
        bar.close()
    plot_results(rows, out)
    return rows


def aggregate(
    rows: Sequence[Dict[str, Any]], axis: str, metric: str
) -> Dict[Tuple[Any, ...], Dict[Any, Tuple[float, float, int]]]:
    """
    Mean, standard deviation and count of ``metric`` over objects and seeds for every value of
    ``axis``, one series per combination of the other swept conditions.
    """
    varying = [
        c for c in CONDITION_COLUMNS if c != axis and len({r[c] for r in rows}) > 1
    ]
    values: Dict[Tuple[Any, ...], Dict[Any, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["status"] != "ok" or r[metric] is None:
            continue
        condition = tuple((c, r[c]) for c in varying)
        values[condition][r[axis]].append(float(r[metric]))
    return {
        condition: {
            x: (float(np.mean(v)), float(np.std(v)), len(v)) for x, v in sorted(series.items())
        }
        for condition, series in values.items()
    }


def plot_results(rows: Sequence[Dict[str, Any]], out_dir: Union[str, Path]) -> List[Path]:
    paths = []
    for axis, xlabel in PLOT_AXES.items():
        if len({r[axis] for r in rows}) < 2:
            continue
        for metric, ylabel in PLOT_METRICS.items():
            series = aggregate(rows, axis, metric)
            if not series:
                continue
            fig, ax = plt.subplots(figsize=(6, 4))
            for condition, points in series.items():
                xs = list(points)
                label = ", ".join(f"{c}={v}" for c, v in condition) or metric
                ax.errorbar(
                    xs,
                    [points[x][0] for x in xs],
                    yerr=[points[x][1] for x in xs],
                    label=label,
                    fmt="-o",
                    capsize=3,
                )
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize="small")
            fig.tight_layout()
            path = Path(out_dir) / f"{axis}__{metric}.svg"
            fig.savefig(path, format="svg")
            plt.close(fig)
            paths.append(path)
    return paths
