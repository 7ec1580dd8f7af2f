"""Synthetic worlds and a skew-aware LiDAR scan simulator.

The simulator is the ground-truth oracle for the odometry tests: scans are
ray-cast analytically against boxes, planes, and sphere landmarks, and scan
skew is injected by inverting the same per-point motion model the de-skew
filter applies, so de-skewing a scan with its own twist reproduces the
zero-twist scan to machine precision.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Sequence, Tuple

import numpy as np

from voxlo.geometry import Pose3, Rot3, Twist, so3_exp
from voxlo.maps import PointCloudLayer

_RAY_EPS = 1e-9


@dataclasses.dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]


@dataclasses.dataclass(frozen=True)
class HorizontalPlane:
    z: float = 0.0


@dataclasses.dataclass
class World:
    seed: int
    planes: List[HorizontalPlane]
    boxes: List[Box]
    scatter: np.ndarray  # (N, 3) landmark centers
    scatter_radius: float = 0.3

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "planes": [p.z for p in self.planes],
            "boxes": [[list(b.lo), list(b.hi)] for b in self.boxes],
            "scatter": self.scatter.tolist(),
            "scatter_radius": self.scatter_radius,
        }

    @staticmethod
    def from_dict(d: dict) -> "World":
        return World(
            seed=int(d["seed"]),
            planes=[HorizontalPlane(z) for z in d["planes"]],
            boxes=[Box(tuple(lo), tuple(hi)) for lo, hi in d["boxes"]],
            scatter=np.asarray(d["scatter"], dtype=float).reshape(-1, 3),
            scatter_radius=float(d["scatter_radius"]),
        )


def _poisson_disc(rng: np.random.Generator, extent: float, count: int, min_dist: float) -> np.ndarray:
    """Greedy dart throwing; deterministic given the generator state."""
    accepted: List[np.ndarray] = []
    attempts = max(count * 30, 1)
    half = extent / 2.0
    for _ in range(attempts):
        if len(accepted) >= count:
            break
        cand = rng.uniform(-half, half, size=2)
        if all(np.hypot(*(cand - a[:2])) >= min_dist for a in accepted):
            z = rng.uniform(0.5, 4.0)
            accepted.append(np.array([cand[0], cand[1], z]))
    if not accepted:
        return np.zeros((0, 3))
    return np.vstack(accepted)


def generate_world(
    seed: int,
    extent: float = 100.0,
    surface_count: int = 60,
    scatter_density: float = 0.02,
) -> World:
    """Deterministic world: a ground plane, perimeter walls, boxes at varied
    heights, and Poisson-disc landmark scatter.

    The walls and box density keep point-to-point ICP well conditioned in
    every direction; a bare ground plane (surface_count=0) leaves the
    horizontal motion unconstrained on purpose.
    """
    if extent <= 0:
        raise ValueError("extent must be > 0")
    rng = np.random.default_rng(seed)
    half = extent / 2.0
    boxes = []
    if surface_count > 0:
        # four perimeter walls; their corners anchor yaw and both axes
        t, h = 0.6, 5.0
        boxes += [
            Box((-half - t, -half - t, 0.0), (half + t, -half, h)),
            Box((-half - t, half, 0.0), (half + t, half + t, h)),
            Box((-half - t, -half, 0.0), (-half, half, h)),
            Box((half, -half, 0.0), (half + t, half, h)),
        ]
    for _ in range(max(0, surface_count - len(boxes))):
        cx, cy = rng.uniform(-half, half, size=2)
        w, d = rng.uniform(1.0, 6.0, size=2)
        h = rng.uniform(1.0, 6.0)
        boxes.append(Box((cx, cy, 0.0), (cx + w, cy + d, h)))
    count = int(scatter_density * extent * extent)
    min_dist = extent / math.sqrt(max(count, 1)) / 2.0
    scatter = _poisson_disc(rng, extent, count, min_dist)
    return World(seed=seed, planes=[HorizontalPlane(0.0)], boxes=boxes, scatter=scatter)


def ray_cast(world: World, origin, dirs, max_range: float) -> np.ndarray:
    """Smallest positive hit distance per ray (inf for misses)."""
    dirs = np.asarray(dirs, dtype=float)
    n = len(dirs)
    origin = np.broadcast_to(np.asarray(origin, dtype=float).reshape(-1, 3), (n, 3))
    best = np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for plane in world.planes:
            t = (plane.z - origin[:, 2]) / dirs[:, 2]
            ok = np.isfinite(t) & (t > _RAY_EPS)
            best = np.where(ok, np.minimum(best, t), best)
        for box in world.boxes:
            lo = np.asarray(box.lo)
            hi = np.asarray(box.hi)
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmax > _RAY_EPS)
            t = np.where(tmin > _RAY_EPS, tmin, tmax)
            best = np.where(hit, np.minimum(best, t), best)
        if len(world.scatter):
            r2 = world.scatter_radius**2
            for c in world.scatter:
                oc = origin - c
                b = np.einsum("ij,ij->i", oc, dirs)
                disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r2)
                ok = disc >= 0.0
                sq = np.sqrt(np.where(ok, disc, 0.0))
                t = np.where(-b - sq > _RAY_EPS, -b - sq, -b + sq)
                ok &= t > _RAY_EPS
                best = np.where(ok, np.minimum(best, t), best)
    best[best > max_range] = np.inf
    return best


@dataclasses.dataclass(frozen=True)
class SensorModel:
    rings: int = 16
    points_per_ring: int = 360
    fov_deg: Tuple[float, float] = (-20.0, 10.0)
    max_range: float = 100.0
    scan_period: float = 0.1
    range_noise_std: float = 0.0

    def __post_init__(self):
        if self.rings < 1 or self.points_per_ring < 1:
            raise ValueError("sensor needs at least one ring and one azimuth step")
        if self.scan_period <= 0:
            raise ValueError("scan period must be > 0")


def scan_directions(sensor: SensorModel):
    """Sensor-frame ray directions, per-point times (mid-scan zero), and ring
    ids, in azimuth-sequential (acquisition) order."""
    elev = np.deg2rad(np.linspace(sensor.fov_deg[0], sensor.fov_deg[1], sensor.rings))
    cols = np.arange(sensor.points_per_ring)
    azim = 2.0 * math.pi * cols / sensor.points_per_ring
    times_col = ((cols + 0.5) / sensor.points_per_ring - 0.5) * sensor.scan_period
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(azim), np.sin(azim)
    dirs = np.empty((sensor.points_per_ring, sensor.rings, 3))
    dirs[:, :, 0] = ca[:, None] * ce[None, :]
    dirs[:, :, 1] = sa[:, None] * ce[None, :]
    dirs[:, :, 2] = se[None, :]
    times = np.repeat(times_col, sensor.rings)
    rings = np.tile(np.arange(sensor.rings, dtype=np.int32), sensor.points_per_ring)
    return dirs.reshape(-1, 3), times, rings


def _apply_inverse_motion(points: np.ndarray, times: np.ndarray, twist: Twist) -> np.ndarray:
    """Map static-frame points into each point's emission frame:
    p -> exp(t*w)^T (p - t*v)."""
    shifted = points - times[:, None] * twist.v
    wn = float(np.linalg.norm(twist.w))
    if wn < 1e-14:
        return shifted
    axis = twist.w / wn
    theta = -times * wn
    c = np.cos(theta)[:, None]
    s = np.sin(theta)[:, None]
    cross = np.cross(np.broadcast_to(axis, shifted.shape), shifted)
    k_dot_p = shifted @ axis
    return shifted * c + cross * s + np.outer(k_dot_p, axis) * (1.0 - c)


def simulate_scan(
    world: World,
    pose: Pose3,
    twist: Twist,
    sensor: SensorModel,
    rng: np.random.Generator | int | None = None,
) -> PointCloudLayer:
    """One full sweep from ``pose`` (the mid-scan sensor pose).

    Returned coordinates are raw driver-style readings: each return is given
    in its own emission frame, so a moving sensor yields a skewed cloud that
    :func:`voxlo.pipelines.filter_deskew` undoes exactly.
    """
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(rng)
    dirs_s, times, rings = scan_directions(sensor)
    dirs_w = pose.rot.apply(dirs_s)
    ranges = ray_cast(world, pose.trans, dirs_w, sensor.max_range)
    if sensor.range_noise_std > 0.0:
        noise = rng.normal(0.0, sensor.range_noise_std, size=len(ranges))
        ranges = ranges + noise
    hit = np.isfinite(ranges) & (ranges > 0.0)
    static_pts = dirs_s[hit] * ranges[hit, None]
    t_hit = times[hit]
    raw = static_pts if twist.is_zero() else _apply_inverse_motion(static_pts, t_hit, twist)
    return PointCloudLayer(
        raw,
        time=t_hit,
        ring=rings[hit],
        intensity=np.ones(int(hit.sum())),
    )


def step_pose(pose: Pose3, twist: Twist, dt: float) -> Pose3:
    """Advance a pose by dt under the scan motion model [exp(dt*w) | dt*v]."""
    return pose @ Pose3(Rot3(so3_exp(dt * np.asarray(twist.w))), dt * np.asarray(twist.v))


@dataclasses.dataclass(frozen=True)
class MotionSegment:
    duration: float
    twist: Twist


def constant_speed_profile(duration: float, speed: float) -> List[MotionSegment]:
    return [MotionSegment(duration, Twist(v=[speed, 0.0, 0.0]))]


def yaw_burst_profile(
    speed: float, cruise: float = 4.0, burst: float = 1.0, yaw_rate: float = 1.5, repeats: int = 3
) -> List[MotionSegment]:
    """Forward motion with aggressive yaw-rate bursts in between."""
    segments: List[MotionSegment] = []
    for i in range(repeats):
        segments.append(MotionSegment(cruise, Twist(v=[speed, 0.0, 0.0])))
        sign = 1.0 if i % 2 == 0 else -1.0
        segments.append(
            MotionSegment(burst, Twist(v=[speed, 0.0, 0.0], w=[0.0, 0.0, sign * yaw_rate]))
        )
    segments.append(MotionSegment(cruise, Twist(v=[speed, 0.0, 0.0])))
    return segments


def square_loop_profile(side: float, speed: float, turn_time: float = 2.0) -> List[MotionSegment]:
    """A closed square loop: four straights and four 90 degree left turns."""
    segments: List[MotionSegment] = []
    yaw_rate = (math.pi / 2.0) / turn_time
    for _ in range(4):
        segments.append(MotionSegment(side / speed, Twist(v=[speed, 0.0, 0.0])))
        segments.append(MotionSegment(turn_time, Twist(v=[0.0, 0.0, 0.0], w=[0.0, 0.0, yaw_rate])))
    return segments


def integrate_profile(
    start: Pose3, segments: Sequence[MotionSegment], frame_period: float
) -> Tuple[np.ndarray, List[Pose3], List[Twist]]:
    """Sample poses/twists at the frame rate by chaining per-frame steps."""
    stamps = [0.0]
    poses = [start]
    twists: List[Twist] = []
    t = 0.0
    pose = start
    for seg in segments:
        n = max(1, int(round(seg.duration / frame_period)))
        for _ in range(n):
            twists.append(seg.twist)
            pose = step_pose(pose, seg.twist, frame_period)
            t += frame_period
            stamps.append(t)
            poses.append(pose)
    twists.append(twists[-1] if twists else Twist.zero())
    return np.asarray(stamps), poses, twists


def simulate_sequence(
    world: World,
    start: Pose3,
    segments: Sequence[MotionSegment],
    sensor: SensorModel,
    seed: int = 0,
):
    """Simulate a scan per frame along a motion profile.

    Returns (stamps, scans, ground-truth poses, per-frame twists).
    """
    stamps, poses, twists = integrate_profile(start, segments, sensor.scan_period)
    rng = np.random.default_rng(seed)
    scans = [
        simulate_scan(world, pose, twist, sensor, rng)
        for pose, twist in zip(poses, twists)
    ]
    return stamps, scans, poses, twists
