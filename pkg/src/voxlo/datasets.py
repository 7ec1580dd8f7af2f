"""Point-cloud blob and dataset I/O.

The shared binary format is little-endian records of 4 float32 values
(x, y, z, intensity) -- the same layout as KITTI velodyne ``.bin`` files.
Extra per-point channels travel as parallel sidecar blobs (float32, or int32
for ring ids) declared by the owning index document.
"""

from __future__ import annotations

import json
import math
import os
from typing import Iterator, List, Optional, Tuple

import numpy as np

from voxlo.geometry import Pose3, Rot3
from voxlo.maps import PointCloudLayer


class DatasetError(ValueError):
    pass


def write_point_blob(path, layer: PointCloudLayer) -> None:
    rec = np.zeros((len(layer), 4), dtype="<f4")
    rec[:, :3] = layer.xyz
    if layer.intensity is not None:
        rec[:, 3] = layer.intensity
    rec.tofile(path)


def read_point_blob(path) -> PointCloudLayer:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise DatasetError(f"{path}: byte length not divisible by 16")
    rec = raw.reshape(-1, 4).astype(float)
    return PointCloudLayer(rec[:, :3], intensity=rec[:, 3])


def write_channel_blob(path, values: np.ndarray) -> None:
    if np.issubdtype(values.dtype, np.integer):
        values.astype("<i4").tofile(path)
    else:
        values.astype("<f4").tofile(path)


def read_channel_blob(path, dtype: str) -> np.ndarray:
    return np.fromfile(path, dtype="<i4" if dtype == "i4" else "<f4").astype(
        np.int32 if dtype == "i4" else float
    )


def save_scan(directory, stem: str, layer: PointCloudLayer) -> dict:
    """Write a scan blob plus sidecar channels; returns the index entry."""
    entry = {"blob": f"{stem}.bin", "channels": {}}
    write_point_blob(os.path.join(directory, entry["blob"]), layer)
    for name in ("time", "ring"):
        ch = getattr(layer, name)
        if ch is not None:
            dtype = "i4" if name == "ring" else "f4"
            fname = f"{stem}_{name}.bin"
            write_channel_blob(os.path.join(directory, fname), ch)
            entry["channels"][name] = {"file": fname, "dtype": dtype}
    return entry


def load_scan(directory, entry: dict) -> PointCloudLayer:
    layer = read_point_blob(os.path.join(directory, entry["blob"]))
    kwargs = {}
    for name, spec in entry.get("channels", {}).items():
        kwargs[name] = read_channel_blob(os.path.join(directory, spec["file"]), spec["dtype"])
    if kwargs:
        layer = PointCloudLayer(layer.xyz, intensity=layer.intensity, **kwargs)
    return layer


# ---------------------------------------------------------------------------
# synthetic dataset directories


def write_dataset(
    path,
    stamps: np.ndarray,
    scans: List[PointCloudLayer],
    gt_poses: Optional[List[Pose3]] = None,
    sensor: Optional[dict] = None,
) -> None:
    """A directory with dataset.json, per-frame blobs, and optional TUM GT."""
    os.makedirs(path, exist_ok=True)
    frames = []
    for i, (stamp, scan) in enumerate(zip(stamps, scans)):
        entry = save_scan(path, f"frame{i:06d}", scan)
        entry["stamp"] = float(stamp)
        frames.append(entry)
    index = {"version": 1, "frames": frames, "sensor": sensor or {}}
    if gt_poses is not None:
        from voxlo.evaluation import Trajectory, write_tum

        write_tum(Trajectory(np.asarray(stamps), list(gt_poses)), os.path.join(path, "gt.tum"))
        index["ground_truth"] = "gt.tum"
    with open(os.path.join(path, "dataset.json"), "w") as f:
        json.dump(index, f, indent=1)


def iter_dataset(path) -> Iterator[Tuple[float, PointCloudLayer]]:
    index_path = os.path.join(path, "dataset.json")
    if not os.path.exists(index_path):
        raise DatasetError(f"{path}: no dataset.json found")
    with open(index_path) as f:
        index = json.load(f)
    for entry in index["frames"]:
        yield float(entry["stamp"]), load_scan(path, entry)


def dataset_frame_count(path) -> int:
    with open(os.path.join(path, "dataset.json")) as f:
        return len(json.load(f)["frames"])


# ---------------------------------------------------------------------------
# KITTI odometry layout


KITTI_RATE_HZ = 10.0


def read_kitti_bin(path) -> PointCloudLayer:
    return read_point_blob(path)


def write_kitti_bin(path, layer: PointCloudLayer) -> None:
    write_point_blob(path, layer)


def kitti_per_point_times(layer: PointCloudLayer, period: float = 1.0 / KITTI_RATE_HZ) -> np.ndarray:
    """Reconstruct per-point times from azimuth, mid-scan-zero convention.

    Approximation: assumes one full clockwise-from-forward sweep per scan at
    a constant rate, which holds for the KITTI velodyne packets.
    """
    az = np.arctan2(layer.xyz[:, 1], layer.xyz[:, 0])  # (-pi, pi]
    frac = (-az + math.pi) / (2.0 * math.pi)  # 0 at azimuth pi, sweeping
    return (frac - 0.5) * period


def read_kitti_poses(path) -> List[Pose3]:
    """Poses as 12 space-separated numbers per line (row-major 3x4)."""
    poses = []
    with open(path) as f:
        for line in f:
            vals = [float(x) for x in line.split()]
            if len(vals) != 12:
                raise DatasetError("KITTI pose lines need 12 numbers")
            m = np.asarray(vals).reshape(3, 4)
            poses.append(Pose3(Rot3(m[:, :3]), m[:, 3]))
    return poses


def iter_kitti_dataset(path) -> Iterator[Tuple[float, PointCloudLayer]]:
    """Stream a KITTI sequence directory (velodyne/*.bin); timestamps are
    synthesized at 10 Hz and per-point times reconstructed from azimuth."""
    velodyne = os.path.join(path, "velodyne")
    if not os.path.isdir(velodyne):
        raise DatasetError(f"{path}: no velodyne/ directory")
    files = sorted(f for f in os.listdir(velodyne) if f.endswith(".bin"))
    period = 1.0 / KITTI_RATE_HZ
    for i, fname in enumerate(files):
        layer = read_kitti_bin(os.path.join(velodyne, fname))
        times = kitti_per_point_times(layer, period)
        layer = PointCloudLayer(layer.xyz, intensity=layer.intensity, time=times)
        yield i * period, layer


def open_dataset(path, fmt: str = "auto") -> Iterator[Tuple[float, PointCloudLayer]]:
    if fmt == "auto":
        if os.path.exists(os.path.join(path, "dataset.json")):
            fmt = "voxlo"
        elif os.path.isdir(os.path.join(path, "velodyne")):
            fmt = "kitti"
        else:
            raise DatasetError(f"{path}: unrecognized dataset layout")
    if fmt == "voxlo":
        return iter_dataset(path)
    if fmt == "kitti":
        return iter_kitti_dataset(path)
    raise DatasetError(f"unknown dataset format {fmt!r}")
