"""View-based maps ("simple maps"): ordered key-frames holding a pose
Gaussian, the estimated twist, and the raw observations, from which arbitrary
metric maps can be rebuilt later.

On disk a simple map is a directory with an ``index.json`` plus per-keyframe
point blobs in the shared 16-byte-record format (see :mod:`voxlo.datasets`).
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import List, Optional, Tuple

import numpy as np

from voxlo.datasets import load_scan, save_scan
from voxlo.geometry import (
    Pose3,
    Rot3,
    Twist,
    quaternion_from_rotation,
    rotation_from_quaternion,
)
from voxlo.icp import PosePrior
from voxlo.maps import PointCloudLayer

FORMAT_VERSION = 1


class SimpleMapError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class GnssFix:
    """Geodetic fix: latitude/longitude in degrees, ellipsoid height in
    meters, and the receiver-reported position std in meters."""

    lat: float
    lon: float
    h: float
    std: float = 2.0


@dataclasses.dataclass
class KeyFrame:
    pose: PosePrior
    twist: Twist
    stamp: float
    scan: Optional[PointCloudLayer] = None
    gnss: Optional[GnssFix] = None
    bbox: Optional[Tuple[np.ndarray, np.ndarray]] = None  # robocentric

    def bbox_or_scan(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.bbox is not None:
            return self.bbox
        if self.scan is None or len(self.scan) == 0:
            raise SimpleMapError("keyframe has neither bbox metadata nor scan")
        return self.scan.bounding_box()


class SimpleMap:
    """Ordered key-frames with strictly increasing stamps."""

    def __init__(self, keyframes: Optional[List[KeyFrame]] = None):
        self.keyframes: List[KeyFrame] = []
        for kf in keyframes or []:
            self.append(kf)

    def append(self, kf: KeyFrame) -> None:
        if self.keyframes and kf.stamp <= self.keyframes[-1].stamp:
            raise SimpleMapError("keyframe stamps must be strictly increasing")
        self.keyframes.append(kf)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def __getitem__(self, i) -> KeyFrame:
        return self.keyframes[i]

    def poses(self) -> List[Pose3]:
        return [kf.pose.mean for kf in self.keyframes]

    def stamps(self) -> np.ndarray:
        return np.asarray([kf.stamp for kf in self.keyframes])

    def with_poses(self, poses: List[Pose3]) -> "SimpleMap":
        if len(poses) != len(self.keyframes):
            raise SimpleMapError("pose count mismatch")
        out = SimpleMap()
        for kf, pose in zip(self.keyframes, poses):
            out.append(
                KeyFrame(
                    pose=PosePrior(pose, kf.pose.cov),
                    twist=kf.twist,
                    stamp=kf.stamp,
                    scan=kf.scan,
                    gnss=kf.gnss,
                    bbox=kf.bbox,
                )
            )
        return out

    def gnss_count(self) -> int:
        return sum(1 for kf in self.keyframes if kf.gnss is not None)


def _pack_cov(cov: np.ndarray) -> list:
    iu = np.triu_indices(6)
    return np.asarray(cov)[iu].tolist()


def _unpack_cov(values) -> np.ndarray:
    cov = np.zeros((6, 6))
    iu = np.triu_indices(6)
    cov[iu] = values
    cov = cov + np.triu(cov, 1).T
    return cov


def save_simplemap(sm: SimpleMap, path, sensor: Optional[dict] = None) -> None:
    os.makedirs(path, exist_ok=True)
    records = []
    for i, kf in enumerate(sm):
        pose = kf.pose.mean
        q = quaternion_from_rotation(pose.rot.m)
        rec = {
            "id": i,
            "stamp": float(kf.stamp),
            "pose": [*map(float, pose.trans), *map(float, q)],  # qw last
            "pose_cov": _pack_cov(kf.pose.cov),
            "twist": [*map(float, kf.twist.v), *map(float, kf.twist.w)],
        }
        if kf.bbox is not None:
            rec["bbox"] = [*map(float, kf.bbox[0]), *map(float, kf.bbox[1])]
        if kf.gnss is not None:
            rec["gnss"] = {
                "lat": kf.gnss.lat,
                "lon": kf.gnss.lon,
                "h": kf.gnss.h,
                "std": kf.gnss.std,
            }
        if kf.scan is not None:
            rec.update(save_scan(path, f"kf{i:06d}", kf.scan))
        records.append(rec)
    index = {"version": FORMAT_VERSION, "sensor": sensor or {}, "keyframes": records}
    tmp = os.path.join(path, "index.json.tmp")
    with open(tmp, "w") as f:
        json.dump(index, f, indent=1)
    os.replace(tmp, os.path.join(path, "index.json"))


def load_simplemap(path) -> SimpleMap:
    index_path = os.path.join(path, "index.json")
    if not os.path.exists(index_path):
        raise SimpleMapError(f"{path}: no index.json")
    with open(index_path) as f:
        index = json.load(f)
    if index.get("version") != FORMAT_VERSION:
        raise SimpleMapError(f"unsupported simple-map version {index.get('version')}")
    sm = SimpleMap()
    for rec in index["keyframes"]:
        pose_vals = rec["pose"]
        pose = Pose3(Rot3(rotation_from_quaternion(pose_vals[3:7])), pose_vals[:3])
        twist_vals = rec["twist"]
        bbox = None
        if "bbox" in rec:
            b = rec["bbox"]
            bbox = (np.asarray(b[:3], dtype=float), np.asarray(b[3:], dtype=float))
        gnss = None
        if "gnss" in rec:
            g = rec["gnss"]
            gnss = GnssFix(lat=g["lat"], lon=g["lon"], h=g["h"], std=g.get("std", 2.0))
        scan = load_scan(path, rec) if "blob" in rec else None
        sm.append(
            KeyFrame(
                pose=PosePrior(pose, _unpack_cov(rec["pose_cov"])),
                twist=Twist(v=twist_vals[:3], w=twist_vals[3:]),
                stamp=rec["stamp"],
                scan=scan,
                gnss=gnss,
                bbox=bbox,
            )
        )
    return sm
