"""
Field checkpoints and training run directories.

A field checkpoint (``.ofp``) is the magic ``OFP1``, a little-endian u32 header length, a
msgpack header with the field config, bounding box and parameter names and shapes, followed
by every parameter as little-endian float32 in ``ObjectField.parameters()`` order.
"""
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import msgpack
import numpy as np
import torch

from objnerf.config import FieldConfig, HashGridConfig
from objnerf.datamodel import Pose, load_poses, save_poses
from objnerf.errors import CheckpointError
from objnerf.hashfield import ObjectField
from objnerf.trainer import TrainReport

OFP_MAGIC = b"OFP1"
FIELD_FILE = "field.ofp"
POSES_FILE = "poses.json"
TRACE_FILE = "trace.csv"
RUN_FILE = "run.json"


def save_field(field: ObjectField, path: Union[str, Path]) -> None:
    aabb_min, aabb_max = field.aabb
    header = msgpack.packb(
        {
            "config": asdict(field.config),
            "aabb_min": aabb_min.double().tolist(),
            "aabb_max": aabb_max.double().tolist(),
            "params": [[name, list(p.shape)] for name, p in field.named_parameters()],
        }
    )
    with open(path, "wb") as f:
        f.write(OFP_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for p in field.parameters():
            f.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def load_field(path: Union[str, Path]) -> ObjectField:
    """
    Loads a field checkpoint written by :func:`save_field`.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"file not found: {path}")
    data = path.read_bytes()
    if data[:4] != OFP_MAGIC:
        raise CheckpointError(f"not a field checkpoint: {path}")
    (header_len,) = struct.unpack("<I", data[4:8])
    header = msgpack.unpackb(data[8 : 8 + header_len])
    config = dict(header["config"])
    config["grid"] = HashGridConfig(**config["grid"])
    field = ObjectField(FieldConfig(**config), header["aabb_min"], header["aabb_max"])

    offset = 8 + header_len
    names = [name for name, _ in field.named_parameters()]
    if names != [name for name, _ in header["params"]]:
        raise CheckpointError(f"parameter layout mismatch in {path}")
    with torch.no_grad():
        for p in field.parameters():
            n = p.numel()
            if offset + 4 * n > len(data):
                raise CheckpointError(f"truncated field checkpoint: {path}")
            values = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
            p.copy_(torch.from_numpy(values.astype(np.float32).reshape(p.shape)))
            offset += 4 * n
    if offset != len(data):
        raise CheckpointError(f"trailing bytes in field checkpoint: {path}")
    return field


def save_run(
    report: TrainReport, out_dir: Union[str, Path], run_info: Dict[str, Any]
) -> None:
    """Writes the field, optimized poses, loss trace and ``run.json`` of a training run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_field(report.field, out / FIELD_FILE)
    save_poses(report.poses, out / POSES_FILE)
    report.write_trace(out / TRACE_FILE)
    with open(out / RUN_FILE, "w") as f:
        json.dump({**run_info, "counts": report.counts, "wall_s": report.wall_time}, f, indent=2)


def load_run(run_dir: Union[str, Path]) -> Tuple[ObjectField, Optional[List[Pose]]]:
    """
    Loads the field of a training run directory and its optimized poses, if present.
    """
    run = Path(run_dir)
    field = load_field(run / FIELD_FILE)
    poses = load_poses(run / POSES_FILE) if (run / POSES_FILE).exists() else None
    return field, poses
