"""Trajectory metrics: Umeyama alignment, ATE RMSE, and KITTI-style relative
translational/rotational errors, plus TUM trajectory file I/O."""

from __future__ import annotations

import dataclasses
import math
from typing import List, Sequence, Tuple

import numpy as np

from voxlo.geometry import Pose3, Rot3, quaternion_from_rotation, rotation_from_quaternion

DEFAULT_SEGMENT_LENGTHS = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)
ASSOCIATION_MAX_GAP = 0.05


class MetricError(ValueError):
    pass


@dataclasses.dataclass
class Trajectory:
    stamps: np.ndarray
    poses: List[Pose3]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if len(self.stamps) != len(self.poses):
            raise MetricError("stamp/pose count mismatch")
        if len(self.stamps) > 1 and not np.all(np.diff(self.stamps) > 0):
            raise MetricError("stamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.vstack([p.trans for p in self.poses])

    def transformed(self, a: Pose3) -> "Trajectory":
        return Trajectory(self.stamps.copy(), [a @ p for p in self.poses])


def write_tum(trajectory: Trajectory, path) -> None:
    """TUM format: 'stamp tx ty tz qx qy qz qw', 17 significant digits."""
    with open(path, "w", encoding="ascii") as f:
        for stamp, pose in zip(trajectory.stamps, trajectory.poses):
            q = quaternion_from_rotation(pose.rot.m)
            vals = [stamp, *pose.trans, *q]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_tum(path) -> Trajectory:
    stamps = []
    poses = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MetricError(f"malformed TUM line: {line!r}")
            vals = [float(x) for x in parts]
            stamps.append(vals[0])
            poses.append(Pose3(Rot3(rotation_from_quaternion(vals[4:8])), vals[1:4]))
    return Trajectory(np.asarray(stamps), poses)


def associate(est: Trajectory, gt: Trajectory, max_gap: float = ASSOCIATION_MAX_GAP):
    """Nearest-stamp association; returns (est indices, gt indices)."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    gt_stamps = gt.stamps
    pos = np.searchsorted(gt_stamps, est.stamps)
    left = np.clip(pos - 1, 0, len(gt_stamps) - 1)
    right = np.clip(pos, 0, len(gt_stamps) - 1)
    pick = np.where(
        np.abs(gt_stamps[left] - est.stamps) <= np.abs(gt_stamps[right] - est.stamps),
        left,
        right,
    )
    ok = np.abs(gt_stamps[pick] - est.stamps) <= max_gap
    return np.where(ok)[0], pick[ok]


def umeyama_align(est: Trajectory, gt: Trajectory) -> Pose3:
    """Closed-form rigid SE(3) (no scale) minimizing sum ||A p_est - p_gt||^2
    over time-associated position pairs."""
    ie, ig = associate(est, gt)
    if len(ie) < 3:
        raise MetricError(f"need >= 3 associated pose pairs, got {len(ie)}")
    p = est.positions()[ie]
    q = gt.positions()[ig]
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    h = (p - p_mean).T @ (q - q_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = q_mean - r @ p_mean
    return Pose3(Rot3(r), t)


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True) -> float:
    """RMSE of time-associated position differences, optionally after
    Umeyama alignment."""
    if align:
        est = est.transformed(umeyama_align(est, gt))
    ie, ig = associate(est, gt)
    if len(ie) == 0:
        raise MetricError("no associated pose pairs")
    diff = est.positions()[ie] - gt.positions()[ig]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


@dataclasses.dataclass
class RelErrorResult:
    rte_percent: float
    rre_deg_per_100m: float
    per_length: List[Tuple[float, float, float, int]]  # (length, rte%, rre, count)
    segments: int


def rel_errors(
    est: Trajectory,
    gt: Trajectory,
    segment_lengths: Sequence[float] = DEFAULT_SEGMENT_LENGTHS,
    step: int = 1,
) -> RelErrorResult:
    """KITTI-style relative errors, averaged over every start pose and
    every segment length found by arc length along the ground truth."""
    ie, ig = associate(est, gt)
    if len(ie) < 2:
        raise MetricError("not enough associated poses")
    est_poses = [est.poses[i] for i in ie]
    gt_poses = [gt.poses[i] for i in ig]
    gt_xyz = np.vstack([p.trans for p in gt_poses])
    seg = np.linalg.norm(np.diff(gt_xyz, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    t_sums = {length: [] for length in segment_lengths}
    r_sums = {length: [] for length in segment_lengths}
    n = len(gt_poses)
    for i in range(0, n, step):
        for length in segment_lengths:
            j = int(np.searchsorted(arc, arc[i] + length))
            if j >= n:
                continue
            gt_rel = gt_poses[i].inverse() @ gt_poses[j]
            est_rel = est_poses[i].inverse() @ est_poses[j]
            err = gt_rel.inverse() @ est_rel
            t_sums[length].append(np.linalg.norm(err.trans) / length)
            r_sums[length].append(np.linalg.norm(err.rot.log()) / length)
    per_length = []
    all_t = []
    all_r = []
    for length in segment_lengths:
        if not t_sums[length]:
            continue
        t_mean = float(np.mean(t_sums[length]))
        r_mean = float(np.mean(r_sums[length]))
        per_length.append(
            (length, 100.0 * t_mean, math.degrees(r_mean) * 100.0, len(t_sums[length]))
        )
        all_t.extend(t_sums[length])
        all_r.extend(r_sums[length])
    if not all_t:
        raise MetricError("ground-truth path shorter than every segment length")
    return RelErrorResult(
        rte_percent=100.0 * float(np.mean(all_t)),
        rre_deg_per_100m=math.degrees(float(np.mean(all_r))) * 100.0,
        per_length=per_length,
        segments=len(all_t),
    )
