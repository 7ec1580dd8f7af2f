"""Per-scan LiDAR odometry: kinematic prediction, observation pipelines, ICP
alignment with a motion prior, in-loop twist refinement and de-skewing,
adaptive matching-threshold control, map-update/keyframe deciders, and
simple-map accumulation."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Dict, List, Optional

import numpy as np

from voxlo.expressions import Expression, as_expression
from voxlo.geometry import Pose3, Rot3, Twist, so3_log
from voxlo.icp import IcpConfig, Pairings, PosePrior, align
from voxlo.maps import HashedVoxelLayer, MetricMap, PointCloudLayer
from voxlo.pipelines import LowPassFilter, PipelineContext, PipelineStage, run_pipeline
from voxlo.simplemap import GnssFix, KeyFrame, SimpleMap
from voxlo.simulate import step_pose


class OdometryError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class KinematicState:
    """Pose in the map frame plus sensor-frame velocities at one timestep."""

    pose: Pose3
    twist: Twist
    stamp: float


def predict_state(prev: KinematicState, dt: float, odom_increment: Optional[Pose3] = None) -> Pose3:
    """Constant-velocity pose extrapolation, or the odometry increment when
    wheel odometry is available."""
    if dt < 0:
        raise OdometryError("dt must be >= 0")
    if odom_increment is not None:
        return prev.pose @ odom_increment
    return step_pose(prev.pose, prev.twist, dt)


def estimate_twist(t_prev: Pose3, t_now: Pose3, period: float) -> Twist:
    """Constant-velocity twist from two poses one period apart.

    The relative increment D = T_prev^-1 T_now carries the displacement in the
    local (sensor) frame, which is exactly the frame the per-scan de-skew
    model uses, so no further rotation is applied.
    """
    if period <= 0:
        raise OdometryError("period must be > 0")
    delta = t_prev.inverse() @ t_now
    return Twist(v=delta.trans / period, w=delta.rot.log() / period)


def motion_error_delta(dp, d_rot: Rot3, r_max: float) -> float:
    """Expected worst-case point displacement for a pose correction: the
    translation plus the chord swept at the maximum sensor range."""
    if r_max <= 0:
        raise OdometryError("r_max must be > 0")
    angle = float(np.linalg.norm(so3_log(d_rot.m)))
    return float(np.linalg.norm(dp)) + 2.0 * r_max * math.sin(0.5 * angle)


@dataclasses.dataclass
class SigmaController:
    """Proportional feedback on ICP quality driving the matching threshold."""

    kp: float = 2.0
    sigma_min: float = 0.1
    filter: LowPassFilter = dataclasses.field(default_factory=lambda: LowPassFilter(0.9))
    current: float = 1.0

    def reset(self, sigma: float) -> None:
        self.current = max(self.sigma_min, sigma)
        self.filter.reset(self.current)


def update_adaptive_sigma(ctrl: SigmaController, delta: float, quality: float) -> float:
    """quality setpoint is 1; low quality inflates the motion-error estimate,
    widening the next search radius. Saturated below at sigma_min."""
    c = 1.0 + ctrl.kp * (1.0 - quality)
    ctrl.current = max(ctrl.sigma_min, ctrl.filter.update(c * delta))
    return ctrl.current


@dataclasses.dataclass
class DeciderConfig:
    update_translation: Expression = dataclasses.field(
        default_factory=lambda: Expression("clamp(0.02*max_range, 0.1, 2.0)*(1 + 0.5*min(omega_abs, 2))")
    )
    update_rotation: Expression = dataclasses.field(default_factory=lambda: Expression("0.05"))
    keyframe_min_dist: Expression = dataclasses.field(default_factory=lambda: Expression("1.0"))


def decide_updates(
    pose: Pose3,
    last_update_pose: Pose3,
    last_kf_pose: Pose3,
    env: Dict[str, float],
    cfg: Optional[DeciderConfig] = None,
):
    """(update_map, add_keyframe) from distance/rotation travelled since the
    respective last events; thresholds are dynamic expressions."""
    cfg = cfg or DeciderConfig()
    d_t = cfg.update_translation.evaluate(env)
    d_r = cfg.update_rotation.evaluate(env)
    kf_dist = cfg.keyframe_min_dist.evaluate(env)
    update_map = (
        pose.translation_to(last_update_pose) >= d_t
        or pose.rotation_to(last_update_pose) >= d_r
    )
    add_keyframe = pose.translation_to(last_kf_pose) >= kf_dist
    return update_map, add_keyframe


@dataclasses.dataclass
class OdometryConfig:
    observation_pipeline: List[PipelineStage] = dataclasses.field(default_factory=list)
    inner_pipeline: List[PipelineStage] = dataclasses.field(default_factory=list)
    localmap_create: List[PipelineStage] = dataclasses.field(default_factory=list)
    localmap_update: List[PipelineStage] = dataclasses.field(default_factory=list)
    icp: IcpConfig = dataclasses.field(default_factory=IcpConfig)
    deciders: DeciderConfig = dataclasses.field(default_factory=DeciderConfig)
    localization_only: bool = False
    min_quality: float = 0.25
    # adaptive sigma controller; the floor tracks the local-map resolution so
    # pairing search never starves below the map sampling density
    kp: float = 2.0
    alpha: float = 0.9
    sigma_min: Expression = dataclasses.field(default_factory=lambda: Expression("max(0.1, 2*map_voxel)"))
    sigma_initial: Expression = dataclasses.field(default_factory=lambda: Expression("2*map_voxel"))
    # prediction prior stds
    prior_t_std_min: float = 0.1
    prior_r_std_min: float = 0.02
    prior_std_factor: float = 0.5
    # dynamic variables
    near_clip: float = 1.5
    range_percentile: float = 95.0
    localmap_layer: str = "localmap"
    variables: Dict[str, float] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class FrameResult:
    state: KinematicState
    quality: float
    accepted: bool
    map_updated: bool
    keyframe_added: bool
    sigma: float
    pairs: int
    iterations: int
    motion_error: float


def _keyframe_covariance(hessian: np.ndarray, point_std: float = 0.05) -> np.ndarray:
    """Pose covariance from the final ICP Hessian, eigenvalue-clipped so it
    stays SPD and usable as a graph edge information source."""
    try:
        cov = np.linalg.inv(hessian) * point_std**2
        cov = 0.5 * (cov + cov.T)
        vals, vecs = np.linalg.eigh(cov)
        vals = np.clip(vals, 1e-8, 1.0)
        return vecs @ np.diag(vals) @ vecs.T
    except np.linalg.LinAlgError:
        return np.diag([1e-2] * 3 + [1e-3] * 3)


class LidarOdometry:
    """Scan-to-map odometry engine; feed scans in time order."""

    def __init__(self, config: OdometryConfig, prebuilt_map: Optional[HashedVoxelLayer] = None,
                 initial_pose: Optional[Pose3] = None, workers: int = 1):
        self.config = config
        self.map = MetricMap()
        self.map.variables.update(config.variables)
        self.map.variables.setdefault("near_clip", config.near_clip)
        self.state = KinematicState(initial_pose or Pose3.identity(), Twist.zero(), float("nan"))
        self.have_state = False
        self.have_twist = False
        self.controller = SigmaController(kp=config.kp, filter=LowPassFilter(config.alpha))
        self._controller_seeded = False
        self.range_filter = LowPassFilter(config.alpha)
        self.range_seeded = False
        self.trajectory: List[tuple] = []  # (stamp, Pose3)
        self.frame_log: List[FrameResult] = []
        self.simple_map = SimpleMap()
        self.last_update_pose = Pose3.identity()
        self.last_kf_pose = Pose3.identity()
        self.frame_index = 0
        self.workers = workers
        self.pairing_filter: Optional[Callable[[Pairings], Pairings]] = None
        self.icp_log_sink: Optional[Callable[[dict], None]] = None
        if prebuilt_map is not None:
            self.map.set_layer(config.localmap_layer, prebuilt_map)
            self.map.variables["map_voxel"] = prebuilt_map.resolution
        if config.localization_only and prebuilt_map is None:
            raise OdometryError("localization-only mode needs a prebuilt map")

    # -- helpers ----------------------------------------------------------

    def _update_range_variables(self, scan: PointCloudLayer) -> None:
        if len(scan) == 0:
            return
        ranges = np.linalg.norm(scan.xyz, axis=1)
        r_now = float(np.percentile(ranges, self.config.range_percentile))
        if not self.range_seeded:
            self.range_filter.reset(r_now)
            self.range_seeded = True
        self.map.variables["max_range_now"] = r_now
        self.map.variables["max_range"] = self.range_filter.update(r_now)

    def _ensure_local_map(self) -> None:
        if self.config.localmap_layer not in self.map:
            run_pipeline(
                self.config.localmap_create,
                self.map,
                PipelineContext(variables=dict(self.map.variables)),
            )
            layer = self.map.layer(self.config.localmap_layer)
            self.map.variables["map_voxel"] = getattr(layer, "resolution", 1.0)
        if not self._controller_seeded:
            self.controller.sigma_min = self.config.sigma_min.evaluate(self.map.variables)
            self.controller.reset(self.config.sigma_initial.evaluate(self.map.variables))
            self._controller_seeded = True

    def _run_observation(self, scan: PointCloudLayer) -> None:
        ctx = PipelineContext(
            variables=dict(self.map.variables), observation=scan, pose=self.state.pose
        )
        run_pipeline(self.config.observation_pipeline, self.map, ctx)

    def _run_inner(self, twist: Twist, env: Dict[str, float]) -> None:
        ctx = PipelineContext(variables=env, twist=twist)
        run_pipeline(self.config.inner_pipeline, self.map, ctx)

    def _run_map_update(self, pose: Pose3) -> None:
        ctx = PipelineContext(variables=dict(self.map.variables), pose=pose)
        run_pipeline(self.config.localmap_update, self.map, ctx)

    def _prior_from_prediction(self, prediction: Pose3, dt: float) -> PosePrior:
        cfg = self.config
        speed = float(np.linalg.norm(self.state.twist.v))
        omega = float(np.linalg.norm(self.state.twist.w))
        t_std = max(cfg.prior_t_std_min, cfg.prior_std_factor * speed * dt)
        r_std = max(cfg.prior_r_std_min, cfg.prior_std_factor * omega * dt)
        return PosePrior.from_stds(prediction, t_std, r_std)

    def _append_keyframe(self, scan, pose, twist, stamp, hessian, gnss) -> None:
        bbox = scan.bounding_box() if len(scan) else (np.zeros(3), np.zeros(3))
        self.simple_map.append(
            KeyFrame(
                pose=PosePrior(pose, _keyframe_covariance(hessian)),
                twist=twist,
                stamp=stamp,
                scan=scan.copy(),
                gnss=gnss,
                bbox=bbox,
            )
        )
        self.last_kf_pose = pose

    # -- the per-scan step -------------------------------------------------

    def process_scan(
        self,
        scan: PointCloudLayer,
        stamp: float,
        odom_increment: Optional[Pose3] = None,
        gnss: Optional[GnssFix] = None,
    ) -> FrameResult:
        cfg = self.config
        self._update_range_variables(scan)
        self._ensure_local_map()
        first_mapping_frame = not self.have_state and not cfg.localization_only

        dt = 0.0 if not self.have_state else float(stamp - self.state.stamp)
        if self.have_state and dt <= 0:
            raise OdometryError("scan stamps must be strictly increasing")

        self._run_observation(scan)

        if first_mapping_frame:
            pose = self.state.pose
            self.map.variables.update(
                {"speed": 0.0, "omega_abs": 0.0, "sigma": self.controller.current}
            )
            self._set_pose_variables(pose)
            self._run_inner(Twist.zero(), dict(self.map.variables))
            self._run_map_update(pose)
            self.last_update_pose = pose
            hessian = np.eye(6) * 1e4
            self._append_keyframe(scan, pose, Twist.zero(), stamp, hessian, gnss)
            self.state = KinematicState(pose, Twist.zero(), stamp)
            self.have_state = True
            self.trajectory.append((stamp, pose))
            result = FrameResult(self.state, 1.0, True, True, True, self.controller.current, 0, 0, 0.0)
            self.frame_log.append(result)
            self.frame_index += 1
            return result

        # prediction and prior
        prev_pose = self.state.pose
        if not self.have_state:
            prediction = self.state.pose  # localization start: initial guess
            prior = None
        elif odom_increment is not None:
            prediction = predict_state(self.state, dt, odom_increment)
            prior = self._prior_from_prediction(prediction, dt)
        elif self.have_twist:
            prediction = predict_state(self.state, dt)
            prior = self._prior_from_prediction(prediction, dt)
        else:
            prediction = self.state.pose  # no prediction yet: start from last pose
            prior = None

        env = dict(self.map.variables)
        env["sigma"] = self.controller.current
        env["frame"] = float(self.frame_index)

        # initial de-skew with the predicted twist; refreshed inside the loop
        twist_holder = {"twist": self.state.twist if self.have_twist else Twist.zero()}
        self._run_inner(twist_holder["twist"], env)

        period = dt if dt > 0 else 1.0

        def inner_hook(t_iter: Pose3, iteration: int, it_env: Dict[str, float]) -> None:
            if self.have_state:
                twist_holder["twist"] = estimate_twist(prev_pose, t_iter, period)
            self._run_inner(twist_holder["twist"], it_env)

        result = align(
            self.map,
            self.map,
            prediction,
            prior=prior,
            cfg=cfg.icp,
            inner_pipeline=inner_hook,
            env=env,
            log_sink=self.icp_log_sink,
            pairing_filter=self.pairing_filter,
            workers=self.workers,
        )

        # adaptive sigma from the prediction-vs-correction motion error
        correction = prediction.inverse() @ result.pose
        delta = motion_error_delta(
            correction.trans, correction.rot, max(self.map.variables.get("max_range", 1.0), 1.0)
        )
        sigma = update_adaptive_sigma(self.controller, delta, result.quality)

        accepted = result.quality >= cfg.min_quality
        map_updated = False
        keyframe_added = False
        if accepted:
            pose = result.pose
            twist = estimate_twist(prev_pose, pose, period) if self.have_state else Twist.zero()
            self.state = KinematicState(pose, twist, stamp)
            self.have_twist = self.have_state
            self.have_state = True
            self._set_pose_variables(pose)
            self.map.variables["speed"] = float(np.linalg.norm(twist.v))
            self.map.variables["omega_abs"] = float(np.linalg.norm(twist.w))
            env_dec = dict(self.map.variables)
            update_map, add_kf = decide_updates(
                pose, self.last_update_pose, self.last_kf_pose, env_dec, cfg.deciders
            )
            if update_map and not cfg.localization_only:
                self._run_map_update(pose)
                self.last_update_pose = pose
                map_updated = True
            if add_kf and not cfg.localization_only:
                self._append_keyframe(scan, pose, twist, stamp, result.final_hessian, gnss)
                keyframe_added = True
        else:
            # rejected: extrapolate the kinematic state
            pose = prediction
            self.state = KinematicState(pose, self.state.twist, stamp)
            self.have_state = True

        self.trajectory.append((stamp, pose))
        frame = FrameResult(
            self.state,
            result.quality,
            accepted,
            map_updated,
            keyframe_added,
            sigma,
            len(result.pairings) if result.pairings is not None else 0,
            result.iterations,
            delta,
        )
        self.frame_log.append(frame)
        self.frame_index += 1
        return frame

    def _set_pose_variables(self, pose: Pose3) -> None:
        self.map.variables["robot_x"] = float(pose.trans[0])
        self.map.variables["robot_y"] = float(pose.trans[1])
        self.map.variables["robot_z"] = float(pose.trans[2])

    # -- outputs -----------------------------------------------------------

    def trajectory_estimate(self):
        from voxlo.evaluation import Trajectory

        stamps = np.asarray([s for s, _ in self.trajectory])
        poses = [p for _, p in self.trajectory]
        return Trajectory(stamps, poses)

    def local_map_layer(self) -> HashedVoxelLayer:
        return self.map.layer(self.config.localmap_layer)
