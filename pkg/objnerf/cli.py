import csv
import functools
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, TypeVar, Union

import click
import hyperstate
import numpy as np
import torch
from PIL import Image

from objnerf.checkpoint import RUN_FILE, load_run, save_run
from objnerf.config import (
    EvalConfig,
    ExperimentConfig,
    SynthConfig,
    TrainConfig,
    apply_preset,
    default_threads,
)
from objnerf.corruption import MaskNoiseSpec, PoseNoiseSpec, corrupt_dataset
from objnerf.datamodel import (
    Rng,
    SceneDataset,
    load_dataset,
    rgb_to_uint8,
    save_dataset,
    write_dpt,
)
from objnerf.errors import ObjNerfError
from objnerf.evalkit import evaluate_thresholds, render_object_view, views_from_dataset
from objnerf.experiment import (
    RESULT_COLUMNS,
    RESULTS_FILE,
    run_experiment,
    scene_setup,
    trajectory_spec,
)
from objnerf.isolation import classify_frame, visualize_classes
from objnerf.synthscene import make_dataset, scene_to_json
from objnerf.trainer import train

F = TypeVar("F", bound=Callable[..., Any])

CORRUPTION_FILE = "corruption.json"
CLASS_COUNTS_FILE = "counts.csv"
EVAL_RUN_SUFFIX = ".run.json"
# Results rows of `eval`, one per opacity threshold.
EVAL_COLUMNS = RESULT_COLUMNS + ["threshold", "n_correct_pixels", "n_views", "run"]

config_option = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), help="RON config file."
)
overrides_argument = click.argument("overrides", nargs=-1)
seed_option = click.option("--seed", type=int, default=None, help="Random seed.")
full_scale_option = click.option(
    "--full-scale", is_flag=True, help="Full resolution and sample counts instead of desk scale."
)


def diagnose(command: F) -> F:
    """Reports library errors as a one-line diagnostic with a nonzero exit code."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except ObjNerfError as e:
            raise click.ClickException(str(e))

    return wrapper  # type: ignore


def _object_key(key: str) -> Union[int, str]:
    return int(key) if key.isdigit() else key


def _write_run_info(out: Path, info: Dict[str, Any], name: str = RUN_FILE) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w") as f:
        json.dump(info, f, indent=2)


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        return {}
    with open(path) as f:
        return json.load(f)  # type: ignore


def dataset_conditions(in_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    Capture and noise settings of a dataset directory, recovered from the ``corruption.json``
    and ``run.json`` files it was written with. Corrupted datasets are followed back to their
    source; the outermost corruption wins.
    """
    conditions: Dict[str, Any] = {}
    path = Path(in_dir).resolve()
    visited = set()
    while path not in visited:
        visited.add(path)
        corruption = _read_json(path / CORRUPTION_FILE)
        if corruption:
            mask_noise = corruption.get("mask_noise")
            pose_noise = corruption.get("pose_noise")
            if mask_noise is not None:
                conditions.setdefault("mask_iou_target", mask_noise["target_iou"])
            if pose_noise is not None:
                conditions.setdefault("sigma_t_m", pose_noise["sigma_t"])
                conditions.setdefault("sigma_r_deg", math.degrees(pose_noise["sigma_r"]))
            path = (path / corruption["source"]).resolve()
            continue
        info = _read_json(path / RUN_FILE)
        if info.get("command") == "synth":
            conditions["radius_m"] = info["config"]["radius"]
        break
    conditions.setdefault("mask_iou_target", 1.0)
    conditions.setdefault("sigma_t_m", 0.0)
    conditions.setdefault("sigma_r_deg", 0.0)
    return conditions


def _floats(value: str) -> List[float]:
    return [float(v) for v in value.split(",") if v.strip()]


@click.group()
@click.option("-v", "--verbose", count=True, help="Log INFO (-v) or DEBUG (-vv) messages.")
def main(verbose: int) -> None:
    """Object-level radiance field reconstruction from posed RGB-D images and instance masks."""
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    torch.set_num_threads(default_threads())


@main.command()
@click.option("--scene", default="four_objects", show_default=True, help="Built-in scene name or scene JSON file.")
@click.option("--views", type=int, default=None, help="Number of views.")
@click.option("--radius", type=float, default=None, help="Camera distance in meters.")
@click.option("--trajectory", type=click.Choice(["hemisphere", "arc"]), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@seed_option
@full_scale_option
@config_option
@overrides_argument
@diagnose
def synth(
    scene: str,
    views: Optional[int],
    radius: Optional[float],
    trajectory: Optional[str],
    out: str,
    seed: Optional[int],
    full_scale: bool,
    config: Optional[str],
    overrides: Tuple[str, ...],
) -> None:
    """Renders a synthetic dataset of a tabletop scene."""
    cfg = hyperstate.load(SynthConfig, config, list(overrides))
    if full_scale:
        cfg = apply_preset(cfg, SynthConfig.full_scale())
    changes = {"n_views": views, "radius": radius, "trajectory": trajectory}
    description, cfg, intrinsics = scene_setup(cfg, scene)
    cfg = replace(cfg, **{k: v for k, v in changes.items() if v is not None})
    seed = 0 if seed is None else seed

    ds = make_dataset(
        description,
        intrinsics,
        trajectory_spec(cfg, description, cfg.n_views),
        Rng(seed).fork("synth"),
        cfg.looseness,
        progress=True,
    )
    save_dataset(ds, out)
    _write_run_info(
        Path(out),
        {
            "command": "synth",
            "seed": seed,
            "config": asdict(cfg),
            "intrinsics": intrinsics.to_json(),
            "scene": scene_to_json(description),
            "outputs": [str(Path(out).resolve())],
        },
    )
    click.echo(f"Wrote {len(ds.frames)} frames of {len(ds.objects)} objects to {out}")


@main.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--mask-iou", type=float, default=None, help="Target IoU of the corrupted masks.")
@click.option("--mask-mode", type=click.Choice(["balanced", "dilate", "erode"]), default="balanced", show_default=True)
@click.option("--sigma-t", type=float, default=0.0, show_default=True, help="Translation noise in meters.")
@click.option("--sigma-r-deg", type=float, default=0.0, show_default=True, help="Rotation noise in degrees.")
@click.option("--fixed-axis", default=None, help="Rotate about this world axis, e.g. 0,0,1.")
@click.option("--objects", default=None, help="Comma separated instance ids whose masks are corrupted.")
@seed_option
@diagnose
def corrupt(
    in_dir: str,
    out: str,
    mask_iou: Optional[float],
    mask_mode: str,
    sigma_t: float,
    sigma_r_deg: float,
    fixed_axis: Optional[str],
    objects: Optional[str],
    seed: Optional[int],
) -> None:
    """Corrupts the instance masks and/or camera poses of a dataset."""
    seed = 0 if seed is None else seed
    ds = load_dataset(in_dir)
    mask_spec = None
    if mask_iou is not None:
        mask_spec = MaskNoiseSpec(mask_iou, mode=mask_mode, seed=seed)
    axis = None
    if fixed_axis is not None:
        components = np.asarray(_floats(fixed_axis))
        assert components.shape == (3,), f"--fixed-axis needs 3 components, got {fixed_axis}"
        axis = tuple(float(c) for c in components / np.linalg.norm(components))
    pose_spec = PoseNoiseSpec(sigma_t, math.radians(sigma_r_deg), axis, seed)  # type: ignore
    object_ids = None if objects is None else [int(i) for i in objects.split(",")]

    noisy, report = corrupt_dataset(ds, mask_spec, pose_spec, object_ids)
    save_dataset(noisy, out)
    with open(Path(out) / CORRUPTION_FILE, "w") as f:
        json.dump(
            {
                **report.to_json(),
                "seed": seed,
                "source": os.path.relpath(Path(in_dir).resolve(), Path(out).resolve()),
            },
            f,
            indent=2,
        )
    _write_run_info(
        Path(out),
        {
            "command": "corrupt",
            "seed": seed,
            "config": report.to_json(),
            "objects": object_ids,
            "inputs": [str(Path(in_dir).resolve())],
            "outputs": [str(Path(out).resolve())],
        },
    )
    for object_id, ious in report.mask_ious.items():
        if ious:
            click.echo(
                f"object {object_id}: mask IoU {np.mean(ious):.4f} "
                f"(min {np.min(ious):.4f}, max {np.max(ious):.4f}) over {len(ious)} frames"
            )
    click.echo(f"Wrote corrupted dataset to {out}")


@main.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--object", "object_key", required=True, help="Target object id or name.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@diagnose
def classify(in_dir: str, object_key: str, out: str) -> None:
    """Writes the positive/negative/masked ray classification of every frame as images."""
    ds = load_dataset(in_dir)
    target = ds.find_object(_object_key(object_key))
    out_path = Path(out)
    out_path.mkdir(parents=True, exist_ok=True)
    with open(out_path / CLASS_COUNTS_FILE, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["frame", "positive", "negative", "masked", "dropped"])
        writer.writeheader()
        totals = {"positive": 0, "negative": 0, "masked": 0, "dropped": 0}
        for i, frame in enumerate(ds.frames):
            fc = classify_frame(frame, ds.intrinsics, target, ds.objects)
            Image.fromarray(visualize_classes(fc), mode="RGB").save(out_path / f"{i:04d}.png")
            counts = fc.counts()
            writer.writerow({"frame": i, **counts})
            for k, v in counts.items():
                totals[k] += v
    _write_run_info(
        out_path,
        {
            "command": "classify",
            "seed": None,
            "config": {"object": target.name},
            "inputs": [str(Path(in_dir).resolve())],
            "outputs": [str(out_path.resolve())],
            "counts": totals,
        },
    )
    click.echo(" ".join(f"{k} {v}" for k, v in totals.items()))


@main.command(name="train")
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--object", "object_key", required=True, help="Target object id or name.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--depth/--no-depth", default=None, help="Enable the depth loss.")
@click.option("--optimize-extrinsics/--fixed-extrinsics", default=None, help="Jointly optimize the camera poses.")
@click.option("--steps", type=int, default=None, help="Number of optimizer steps.")
@seed_option
@full_scale_option
@config_option
@overrides_argument
@diagnose
def train_command(
    in_dir: str,
    object_key: str,
    out: str,
    depth: Optional[bool],
    optimize_extrinsics: Optional[bool],
    steps: Optional[int],
    seed: Optional[int],
    full_scale: bool,
    config: Optional[str],
    overrides: Tuple[str, ...],
) -> None:
    """Fits an object field to one object of a dataset."""
    cfg = hyperstate.load(TrainConfig, config, list(overrides))
    if full_scale:
        cfg = apply_preset(cfg, TrainConfig.full_scale())
    changes = {
        "use_depth": depth,
        "optimize_extrinsics": optimize_extrinsics,
        "n_steps": steps,
        "seed": seed,
    }
    cfg = replace(cfg, **{k: v for k, v in changes.items() if v is not None})

    ds = load_dataset(in_dir)
    target = ds.find_object(_object_key(object_key))
    report = train(ds, target, cfg)
    save_run(
        report,
        out,
        {
            "command": "train",
            "dataset": str(Path(in_dir).resolve()),
            "object": target.name,
            "seed": cfg.seed,
            "config": asdict(cfg),
            "n_images": len(ds.frames),
            "conditions": dataset_conditions(in_dir),
            "inputs": [str(Path(in_dir).resolve())],
            "outputs": [str(Path(out).resolve())],
        },
    )
    click.echo(f"Trained {target.name} in {report.wall_time:.1f}s, wrote {out}")


def eval_row(run: Union[str, Path], object_name: str) -> Dict[str, Any]:
    """A results row for a training run with the metric columns left empty."""
    info = _read_json(Path(run) / RUN_FILE)
    row: Dict[str, Any] = dict.fromkeys(RESULT_COLUMNS)
    row.update(
        experiment=info.get("experiment", Path(run).resolve().name),
        object=object_name,
        status="ok",
    )
    cell = info.get("cell")
    if cell is not None:
        row.update(
            seed=cell["seed"],
            n_images=cell["n_images"],
            radius_m=cell["radius"],
            mask_iou_target=cell["mask_iou"],
            sigma_t_m=cell["sigma_t"],
            sigma_r_deg=cell["sigma_r_deg"],
            use_depth=cell["use_depth"],
            optimize_extrinsics=cell["optimize_extrinsics"],
        )
    else:
        config = info.get("config", {})
        row.update(
            seed=info.get("seed"),
            n_images=info.get("n_images"),
            use_depth=config.get("use_depth"),
            optimize_extrinsics=config.get("optimize_extrinsics"),
            **info.get("conditions", {}),
        )
    return row


def _load_views(
    in_dir: str, run: str, object_key: str, run_poses: bool
) -> Tuple[SceneDataset, Any, Any]:
    ds = load_dataset(in_dir)
    target = ds.find_object(_object_key(object_key))
    field, poses = load_run(run)
    if run_poses and poses is None:
        raise click.ClickException(f"{run} has no optimized poses")
    return ds, field, views_from_dataset(ds, target.id, poses if run_poses else None)


@main.command()
@click.option("--run", type=click.Path(exists=True, file_okay=False), required=True, help="Training run directory.")
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset providing cameras.")
@click.option("--object", "object_key", required=True, help="Target object id or name.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--run-poses", is_flag=True, help="Render from the poses optimized during training.")
@config_option
@overrides_argument
@diagnose
def render(
    run: str,
    in_dir: str,
    object_key: str,
    out: str,
    run_poses: bool,
    config: Optional[str],
    overrides: Tuple[str, ...],
) -> None:
    """Renders depth, mask and color images of a trained field from the cameras of a dataset."""
    cfg = hyperstate.load(EvalConfig, config, list(overrides))
    ds, field, views = _load_views(in_dir, run, object_key, run_poses)
    out_path = Path(out)
    for sub in ("rgb", "depth", "mask"):
        (out_path / sub).mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(views):
        depth, mask, rgb = render_object_view(field, view.pose, view.intrinsics, cfg)
        Image.fromarray(rgb_to_uint8(rgb), mode="RGB").save(out_path / "rgb" / f"{i:04d}.png")
        write_dpt(out_path / "depth" / f"{i:04d}.dpt", depth)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out_path / "mask" / f"{i:04d}.png")
    _write_run_info(
        out_path,
        {
            "command": "render",
            "seed": None,
            "config": asdict(cfg),
            "object": object_key,
            "run_poses": run_poses,
            "inputs": [str(Path(run).resolve()), str(Path(in_dir).resolve())],
            "outputs": [str(out_path.resolve())],
        },
    )
    click.echo(f"Rendered {len(views)} views to {out}")


@main.command(name="eval")
@click.option("--run", type=click.Path(exists=True, file_okay=False), required=True, help="Training run directory.")
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset with ground truth.")
@click.option("--object", "object_key", required=True, help="Target object id or name.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file, stdout if not given.")
@click.option("--run-poses", is_flag=True, help="Render from the poses optimized during training.")
@click.option("--thresholds", default=None, help="Comma separated opacity thresholds.")
@config_option
@overrides_argument
@diagnose
def eval_command(
    run: str,
    in_dir: str,
    object_key: str,
    out: Optional[str],
    run_poses: bool,
    thresholds: Optional[str],
    config: Optional[str],
    overrides: Tuple[str, ...],
) -> None:
    """Scores a trained field against the ground truth of a dataset."""
    cfg = hyperstate.load(EvalConfig, config, list(overrides))
    levels = [cfg.opacity_threshold] if thresholds is None else _floats(thresholds)
    ds, field, views = _load_views(in_dir, run, object_key, run_poses)
    target = ds.find_object(_object_key(object_key))
    start_time = time.time()
    records = evaluate_thresholds(field, views, levels, cfg, progress=True)
    wall_s = round(time.time() - start_time, 1)

    base = eval_row(run, target.name)
    rows = [
        {
            **base,
            "depth_mae_m": record.depth_mae,
            "mask_iou": record.iou,
            "wall_s": wall_s,
            "threshold": level,
            "n_correct_pixels": record.n_correct_pixels,
            "n_views": len(views),
            "run": str(Path(run).resolve()),
        }
        for level, record in zip(levels, records)
    ]
    f = open(out, "w", newline="") if out is not None else sys.stdout
    try:
        writer = csv.DictWriter(f, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not None:
            f.close()
    # Without --out the record goes next to the training run.
    record_path = (
        Path(run) / f"eval{EVAL_RUN_SUFFIX}" if out is None else Path(out).with_suffix(EVAL_RUN_SUFFIX)
    )
    _write_run_info(
        record_path.resolve().parent,
        {
            "command": "eval",
            "seed": None,
            "config": asdict(cfg),
            "object": target.name,
            "thresholds": levels,
            "run_poses": run_poses,
            "inputs": [str(Path(run).resolve()), str(Path(in_dir).resolve())],
            "outputs": [] if out is None else [str(Path(out).resolve())],
            "rows": rows,
        },
        name=record_path.name,
    )


@main.command()
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--workers", type=int, default=None, help="Number of cells run in parallel.")
@seed_option
@full_scale_option
@config_option
@overrides_argument
@diagnose
def experiment(
    out: Optional[str],
    workers: Optional[int],
    seed: Optional[int],
    full_scale: bool,
    config: Optional[str],
    overrides: Tuple[str, ...],
) -> None:
    """Runs a sweep and writes results.csv and plots."""
    cfg = hyperstate.load(ExperimentConfig, config, list(overrides))
    if full_scale:
        cfg = replace(
            cfg,
            train=apply_preset(cfg.train, TrainConfig.full_scale()),
            synth=apply_preset(cfg.synth, SynthConfig.full_scale()),
        )
    changes = {"out_dir": out, "workers": workers, "base_seed": seed}
    cfg = replace(cfg, **{k: v for k, v in changes.items() if v is not None})

    rows = run_experiment(cfg)
    failed = [r for r in rows if r["status"] != "ok"]
    click.echo(
        f"{len(rows) - len(failed)}/{len(rows)} cells succeeded, results in "
        f"{Path(cfg.out_dir) / cfg.name / RESULTS_FILE}"
    )
    for r in failed:
        click.echo(click.style(f"{r['object']} seed {r['seed']}: {r['status']}", fg="red"), err=True)


if __name__ == "__main__":
    main()
