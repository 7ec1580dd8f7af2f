"""Map processing pipelines: ordered stages over the layers of a MetricMap.

A pipeline is a list of stages; each stage reads/writes named layers and has
parameters given as expressions that are re-evaluated against the dynamic
variable environment on every invocation.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import yaml

from voxlo.expressions import Expression, as_expression
from voxlo.geometry import Pose3, Twist
from voxlo.maps import (
    HashedVoxelLayer,
    MetricMap,
    OccupancyVoxelLayer,
    PointCloudLayer,
)


class PipelineError(ValueError):
    """A stage failed; the message carries the stage index and cause."""


class FilterError(ValueError):
    """A filter was applied to an incompatible layer."""


class LowPassFilter:
    """First-order IIR low-pass: y <- alpha * y + (1 - alpha) * x."""

    def __init__(self, alpha: float, initial: float = 0.0):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        self.alpha = float(alpha)
        self.y = float(initial)

    def update(self, x: float) -> float:
        self.y = self.alpha * self.y + (1.0 - self.alpha) * x
        return self.y

    def reset(self, y: float) -> None:
        self.y = float(y)


def low_pass_update(state: LowPassFilter, x: float) -> float:
    return state.update(x)


@dataclasses.dataclass
class PipelineContext:
    """Per-invocation context: variables feed expressions; pose/twist/
    observation feed the stages that need structured inputs."""

    variables: Dict[str, float] = dataclasses.field(default_factory=dict)
    pose: Pose3 = dataclasses.field(default_factory=Pose3.identity)
    twist: Twist = dataclasses.field(default_factory=Twist.zero)
    observation: Optional[PointCloudLayer] = None

    def env(self, mmap: MetricMap) -> Dict[str, float]:
        env = dict(mmap.variables)
        env.update(self.variables)
        return env


STAGE_KINDS = (
    "generator",
    "deskew",
    "adjust_timestamps",
    "voxel_downsample",
    "spatial_split",
    "insert_into_map",
    "remove_dynamic",
    "decimate",
    "delete_layer",
)


@dataclasses.dataclass
class PipelineStage:
    kind: str
    inputs: tuple = ()
    outputs: tuple = ()
    params: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise PipelineError(f"unknown stage kind {self.kind!r}")
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)

    def expr(self, name: str, default=None) -> Optional[Expression]:
        value = self.params.get(name, default)
        if value is None:
            return None
        return as_expression(value)

    def number(self, name: str, env, default=None) -> Optional[float]:
        e = self.expr(name, default)
        return None if e is None else e.evaluate(env)

    def flag(self, name: str, default: bool) -> bool:
        return bool(self.params.get(name, default))

    def text(self, name: str, default=None) -> Optional[str]:
        value = self.params.get(name, default)
        return None if value is None else str(value)


# ---------------------------------------------------------------------------
# filter implementations


def filter_deskew(layer: PointCloudLayer, pose: Pose3, twist: Twist) -> PointCloudLayer:
    """Motion-compensate a scan: each point with relative time t maps through
    pose * [exp(t*w) | t*v]. Channels are preserved."""
    if layer.time is None:
        raise FilterError("deskew requires a per-point time channel")
    t = layer.time
    pts = layer.xyz
    wn = float(np.linalg.norm(twist.w))
    if wn < 1e-14:
        rotated = pts
    else:
        axis = twist.w / wn
        theta = t * wn
        c = np.cos(theta)[:, None]
        s = np.sin(theta)[:, None]
        cross = np.cross(np.broadcast_to(axis, pts.shape), pts)
        k_dot_p = pts @ axis
        rotated = pts * c + cross * s + np.outer(k_dot_p, axis) * (1.0 - c)
    out = pts if layer.time is None else rotated + t[:, None] * twist.v
    out = pose.apply(out)
    return PointCloudLayer(out, **{k: v.copy() for k, v in layer.channels.items()})


TIME_CONVENTIONS = ("first_point_zero", "mid_scan_zero", "normalized_01")


def filter_adjust_timestamps(layer: PointCloudLayer, convention: str) -> PointCloudLayer:
    if layer.time is None:
        raise FilterError("adjust_timestamps requires a time channel")
    if convention not in TIME_CONVENTIONS:
        raise FilterError(f"unknown timestamp convention {convention!r}")
    t = layer.time
    out = layer.copy()
    if len(t) == 0:
        return out
    lo, hi = float(t.min()), float(t.max())
    span = hi - lo
    if span == 0.0 and len(t) > 1:
        warnings.warn("constant timestamps across a multi-point scan; set to 0")
        out.time = np.zeros_like(t)
        return out
    if convention == "first_point_zero":
        out.time = t - lo
    elif convention == "mid_scan_zero":
        out.time = t - 0.5 * (lo + hi)
    else:  # normalized_01
        out.time = (t - lo) / span if span > 0.0 else np.zeros_like(t)
    return out


def filter_voxel_downsample(
    layer: PointCloudLayer, resolution: float, method: str = "first_in_voxel"
) -> PointCloudLayer:
    """Keep at most one point per voxel, in ascending first-occurrence order."""
    if resolution <= 0:
        raise FilterError("downsample resolution must be > 0")
    if len(layer) == 0:
        return layer.copy()
    from voxlo.maps import encode_voxel_keys, voxel_index

    keys = encode_voxel_keys(voxel_index(layer.xyz, resolution))
    if method == "first_in_voxel":
        _, first = np.unique(keys, return_index=True)
        return layer.select(np.sort(first))
    if method == "voxel_average":
        uniq, first, inverse, counts = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True
        )
        order = np.argsort(first, kind="stable")
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inverse, layer.xyz)
        centroid = sums / counts[:, None]
        kwargs = {}
        for name, ch in layer.channels.items():
            if np.issubdtype(ch.dtype, np.floating):
                acc = np.zeros(len(uniq))
                np.add.at(acc, inverse, ch)
                kwargs[name] = (acc / counts)[order]
            else:
                kwargs[name] = ch[np.sort(first)]
        return PointCloudLayer(centroid[order], **kwargs)
    raise FilterError(f"unknown downsample method {method!r}")


def filter_spatial_split_range(
    layer: PointCloudLayer, center, rmin: float, rmax: float
):
    d = np.linalg.norm(layer.xyz - np.asarray(center, dtype=float), axis=1)
    keep = (d >= rmin) & (d <= rmax)
    return layer.select(keep), layer.select(~keep)


def filter_spatial_split_box(layer: PointCloudLayer, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inside = np.all((layer.xyz >= lo) & (layer.xyz <= hi), axis=1)
    return layer.select(inside), layer.select(~inside)


def filter_insert_into_map(src: PointCloudLayer, dst, origin) -> None:
    if isinstance(dst, PointCloudLayer):
        dst.extend(src)
    elif isinstance(dst, HashedVoxelLayer):
        dst.insert_points(src.xyz)
    elif isinstance(dst, OccupancyVoxelLayer):
        if len(src):
            dst.update_rays(origin, src.xyz)
    else:
        raise FilterError(f"cannot insert into layer of type {type(dst).__name__}")


def filter_remove_dynamic(
    points: PointCloudLayer, occupancy: OccupancyVoxelLayer, threshold: float
):
    """Split points whose voxel has been seen free more often than occupied.
    Unobserved voxels (occupancy exactly 0.5) count as static."""
    if not 0.0 < threshold < 0.5:
        raise FilterError("dynamic threshold must be in (0, 0.5)")
    occ = occupancy.occupancy_at_points(points.xyz) if len(points) else np.zeros(0)
    dynamic = occ < threshold
    return points.select(~dynamic), points.select(dynamic)


def filter_decimate(layer: PointCloudLayer, keep_every: int) -> PointCloudLayer:
    k = int(keep_every)
    if k < 1:
        raise FilterError("decimation factor must be >= 1")
    return layer.select(np.arange(0, len(layer), k))


# ---------------------------------------------------------------------------
# stage execution


def _make_layer(kind: str, params: dict, env) -> object:
    if kind == "points":
        return PointCloudLayer()
    if kind == "hashed_voxels":
        res = as_expression(params.get("resolution", 1.0)).evaluate(env)
        cap = int(as_expression(params.get("max_points_per_voxel", 20)).evaluate(env))
        return HashedVoxelLayer(resolution=res, max_points_per_voxel=cap)
    if kind == "occupancy_voxels":
        res = as_expression(params.get("resolution", 1.0)).evaluate(env)
        kwargs = {}
        for name in ("l_occ", "l_free", "l_min", "l_max"):
            if name in params:
                kwargs[name] = as_expression(params[name]).evaluate(env)
        return OccupancyVoxelLayer(resolution=res, **kwargs)
    raise PipelineError(f"unknown layer type {kind!r}")


def _in_layer(mmap: MetricMap, name: str):
    return mmap.layer(name)


def _run_generator(stage, mmap, ctx, env):
    out = stage.outputs[0]
    layer_type = stage.text("layer_type", "points")
    from_observation = stage.flag("from_observation", layer_type == "points")
    if from_observation:
        if ctx.observation is None:
            raise PipelineError("generator expects an observation but none was provided")
        mmap.set_layer(out, ctx.observation.copy())
        return
    if out not in mmap:
        mmap.set_layer(out, _make_layer(layer_type, stage.params, env))


def _run_deskew(stage, mmap, ctx, env):
    use_pose = stage.flag("use_pose", False)
    skip = stage.flag("skip_without_time", False)
    pose = ctx.pose if use_pose else Pose3.identity()
    for src, dst in zip(stage.inputs, stage.outputs):
        layer = _in_layer(mmap, src)
        if skip and getattr(layer, "time", None) is None:
            mmap.set_layer(dst, layer.copy() if hasattr(layer, "copy") else layer)
            continue
        mmap.set_layer(dst, filter_deskew(layer, pose, ctx.twist))


def _run_adjust_timestamps(stage, mmap, ctx, env):
    convention = stage.text("convention", "mid_scan_zero")
    skip = stage.flag("skip_without_time", False)
    out = stage.outputs[0] if stage.outputs else stage.inputs[0]
    layer = _in_layer(mmap, stage.inputs[0])
    if skip and getattr(layer, "time", None) is None:
        mmap.set_layer(out, layer)
        return
    mmap.set_layer(out, filter_adjust_timestamps(layer, convention))


def _run_voxel_downsample(stage, mmap, ctx, env):
    res = stage.number("resolution", env, 1.0)
    method = stage.text("method", "first_in_voxel")
    mmap.set_layer(
        stage.outputs[0], filter_voxel_downsample(_in_layer(mmap, stage.inputs[0]), res, method)
    )


def _run_spatial_split(stage, mmap, ctx, env):
    layer = _in_layer(mmap, stage.inputs[0])
    predicate = stage.text("predicate", "range")
    if predicate == "range":
        center = (
            stage.number("center_x", env, 0.0),
            stage.number("center_y", env, 0.0),
            stage.number("center_z", env, 0.0),
        )
        rmin = stage.number("rmin", env, 0.0)
        rmax = stage.number("rmax", env, float("inf"))
        passed, rejected = filter_spatial_split_range(layer, center, rmin, rmax)
    elif predicate == "box":
        lo = [stage.number(f"{ax}_min", env, float("-inf")) for ax in "xyz"]
        hi = [stage.number(f"{ax}_max", env, float("inf")) for ax in "xyz"]
        passed, rejected = filter_spatial_split_box(layer, lo, hi)
    else:
        raise PipelineError(f"unknown split predicate {predicate!r}")
    mmap.set_layer(stage.outputs[0], passed)
    if len(stage.outputs) > 1 and stage.outputs[1]:
        mmap.set_layer(stage.outputs[1], rejected)


def _run_insert_into_map(stage, mmap, ctx, env):
    src = _in_layer(mmap, stage.inputs[0])
    dst = _in_layer(mmap, stage.outputs[0])
    if stage.flag("transform_to_map", True):
        src = src.transformed(ctx.pose)
        origin = ctx.pose.trans
    else:
        origin = np.zeros(3)
    filter_insert_into_map(src, dst, origin)


def _run_remove_dynamic(stage, mmap, ctx, env):
    points = _in_layer(mmap, stage.inputs[0])
    occupancy = _in_layer(mmap, stage.inputs[1])
    if not isinstance(occupancy, OccupancyVoxelLayer):
        raise FilterError("remove_dynamic needs an occupancy layer as second input")
    threshold = stage.number("threshold", env, 0.25)
    static, dynamic = filter_remove_dynamic(points, occupancy, threshold)
    mmap.set_layer(stage.outputs[0], static)
    if len(stage.outputs) > 1 and stage.outputs[1]:
        mmap.set_layer(stage.outputs[1], dynamic)


def _run_decimate(stage, mmap, ctx, env):
    k = int(stage.number("keep_every", env, 1.0))
    mmap.set_layer(stage.outputs[0], filter_decimate(_in_layer(mmap, stage.inputs[0]), k))


def _run_delete_layer(stage, mmap, ctx, env):
    for name in stage.inputs:
        mmap.drop_layer(name)


_STAGE_RUNNERS: Dict[str, Callable] = {
    "generator": _run_generator,
    "deskew": _run_deskew,
    "adjust_timestamps": _run_adjust_timestamps,
    "voxel_downsample": _run_voxel_downsample,
    "spatial_split": _run_spatial_split,
    "insert_into_map": _run_insert_into_map,
    "remove_dynamic": _run_remove_dynamic,
    "decimate": _run_decimate,
    "delete_layer": _run_delete_layer,
}


def run_pipeline(
    stages: Sequence[PipelineStage], mmap: MetricMap, ctx: Optional[PipelineContext] = None
) -> MetricMap:
    """Execute stages in order; the first failing stage aborts with its index."""
    ctx = ctx or PipelineContext()
    for i, stage in enumerate(stages):
        env = ctx.env(mmap)
        try:
            _STAGE_RUNNERS[stage.kind](stage, mmap, ctx, env)
        except PipelineError as e:
            raise PipelineError(f"stage {i} ({stage.kind}): {e}") from e
        except (KeyError, ValueError) as e:
            raise PipelineError(f"stage {i} ({stage.kind}): {e}") from e
    return mmap


# ---------------------------------------------------------------------------
# configuration parsing


def stage_from_dict(spec: dict) -> PipelineStage:
    spec = dict(spec)
    kind = spec.pop("type", None) or spec.pop("kind", None)
    if kind is None:
        raise PipelineError("stage definition needs a 'type' key")

    def names(*keys):
        for key in keys:
            if key in spec:
                value = spec.pop(key)
                if value is None:
                    return ()
                if isinstance(value, str):
                    return (value,)
                return tuple(value)
        return ()

    inputs = names("inputs", "input")
    outputs = names("outputs", "output")
    params = spec.pop("params", {}) or {}
    if spec:
        raise PipelineError(f"unknown stage keys {sorted(spec)} for type {kind!r}")
    return PipelineStage(kind=kind, inputs=inputs, outputs=outputs, params=params)


def stages_from_config(config) -> list:
    return [stage_from_dict(d) for d in (config or [])]


def stages_from_yaml(text: str) -> list:
    return stages_from_config(yaml.safe_load(text))
