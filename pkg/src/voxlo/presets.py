"""Shipped configurations: the default 3D LiDAR odometry preset, the 2D
variant, and the simple-map conversion pipelines, plus YAML config loading.

An odometry config document is either ``{preset: <name>, <overrides...>}`` or
a full specification with pipeline stage lists; see the README for the schema.
"""

from __future__ import annotations

import copy
from typing import Optional

import yaml

from voxlo.expressions import Expression
from voxlo.icp import IcpConfig, MatcherConfig, QualityConfig
from voxlo.odometry import DeciderConfig, OdometryConfig
from voxlo.pipelines import stages_from_config

LIDAR3D_DEFAULT = "lidar3d-default"
LIDAR_2D = "lidar-2d"

_LIDAR3D_PIPELINES = {
    "observation": [
        {"type": "generator", "output": "raw"},
        {
            "type": "adjust_timestamps",
            "input": "raw",
            "output": "raw",
            "params": {"convention": "mid_scan_zero", "skip_without_time": True},
        },
        {
            "type": "spatial_split",
            "input": "raw",
            "outputs": ["filtered"],
            "params": {"predicate": "range", "rmin": "near_clip"},
        },
        {
            "type": "voxel_downsample",
            "input": "filtered",
            "output": "dense_raw",
            "params": {"resolution": "0.5*map_voxel"},
        },
        {
            "type": "voxel_downsample",
            "input": "dense_raw",
            "output": "sparse_raw",
            "params": {"resolution": "1.5*map_voxel"},
        },
    ],
    "inner": [
        {
            "type": "deskew",
            "inputs": ["dense_raw", "sparse_raw"],
            "outputs": ["dense", "sparse"],
            "params": {"skip_without_time": True},
        }
    ],
    "localmap_create": [
        {
            "type": "generator",
            "output": "localmap",
            "params": {
                "layer_type": "hashed_voxels",
                "from_observation": False,
                "resolution": "clamp(0.015*max_range, 0.5, 1.0)",
                "max_points_per_voxel": 20,
            },
        }
    ],
    "localmap_update": [
        {"type": "insert_into_map", "input": "dense", "output": "localmap"}
    ],
}

_LIDAR2D_PIPELINES = {
    "observation": [
        {"type": "generator", "output": "raw"},
        {
            "type": "adjust_timestamps",
            "input": "raw",
            "output": "raw",
            "params": {"convention": "mid_scan_zero", "skip_without_time": True},
        },
        {
            "type": "spatial_split",
            "input": "raw",
            "outputs": ["filtered"],
            "params": {"predicate": "range", "rmin": "near_clip"},
        },
        {
            "type": "voxel_downsample",
            "input": "filtered",
            "output": "sparse_raw",
            "params": {"resolution": "0.5*map_voxel"},
        },
    ],
    "inner": [
        {
            "type": "deskew",
            "inputs": ["sparse_raw"],
            "outputs": ["sparse", ],
            "params": {"skip_without_time": True},
        }
    ],
    "localmap_create": [
        {
            "type": "generator",
            "output": "localmap",
            "params": {
                "layer_type": "occupancy_voxels",
                "from_observation": False,
                "resolution": "clamp(0.005*max_range, 0.05, 0.25)",
            },
        }
    ],
    "localmap_update": [
        {"type": "insert_into_map", "input": "sparse", "output": "localmap"}
    ],
}


def _base_icp() -> IcpConfig:
    return IcpConfig(
        max_iterations=300,
        eps_p=1e-4,
        eps_r=5e-5,
        kernel="geman_mcclure",
        gn_inner_iterations=2,
        sigma="sigma",
        matchers=[MatcherConfig(local_layer="sparse", global_layer="localmap", max_dist="sigma")],
        quality=[QualityConfig("paired_ratio")],
    )


def lidar3d_default_config(**overrides) -> OdometryConfig:
    cfg = OdometryConfig(
        observation_pipeline=stages_from_config(copy.deepcopy(_LIDAR3D_PIPELINES["observation"])),
        inner_pipeline=stages_from_config(copy.deepcopy(_LIDAR3D_PIPELINES["inner"])),
        localmap_create=stages_from_config(copy.deepcopy(_LIDAR3D_PIPELINES["localmap_create"])),
        localmap_update=stages_from_config(copy.deepcopy(_LIDAR3D_PIPELINES["localmap_update"])),
        icp=_base_icp(),
    )
    return _apply_overrides(cfg, overrides)


def lidar2d_config(**overrides) -> OdometryConfig:
    cfg = OdometryConfig(
        observation_pipeline=stages_from_config(copy.deepcopy(_LIDAR2D_PIPELINES["observation"])),
        inner_pipeline=stages_from_config(copy.deepcopy(_LIDAR2D_PIPELINES["inner"])),
        localmap_create=stages_from_config(copy.deepcopy(_LIDAR2D_PIPELINES["localmap_create"])),
        localmap_update=stages_from_config(copy.deepcopy(_LIDAR2D_PIPELINES["localmap_update"])),
        icp=_base_icp(),
        near_clip=0.3,
        sigma_min=Expression("max(0.05, 3*map_voxel)"),
        sigma_initial=Expression("max(8*map_voxel, 0.5)"),
        prior_t_std_min=0.05,
    )
    return _apply_overrides(cfg, overrides)


_PRESETS = {LIDAR3D_DEFAULT: lidar3d_default_config, LIDAR_2D: lidar2d_config}


def _apply_overrides(cfg: OdometryConfig, overrides: dict) -> OdometryConfig:
    overrides = dict(overrides)
    for key in (
        "min_quality",
        "localization_only",
        "kp",
        "alpha",
        "near_clip",
        "range_percentile",
        "prior_t_std_min",
        "prior_r_std_min",
        "prior_std_factor",
    ):
        if key in overrides:
            setattr(cfg, key, overrides.pop(key))
    for key in ("sigma_initial", "sigma_min"):
        if key in overrides:
            setattr(cfg, key, Expression(overrides.pop(key)))
    if "variables" in overrides:
        cfg.variables.update(overrides.pop("variables"))
    for key, attr in (
        ("update_translation", "update_translation"),
        ("update_rotation", "update_rotation"),
        ("keyframe_min_dist", "keyframe_min_dist"),
    ):
        if key in overrides:
            setattr(cfg.deciders, attr, Expression(overrides.pop(key)))
    icp_over = overrides.pop("icp", {})
    for key, value in icp_over.items():
        if key == "matchers":
            cfg.icp.matchers = [MatcherConfig(**m) for m in value]
        elif key == "quality":
            cfg.icp.quality = [QualityConfig(**q) for q in value]
        else:
            setattr(cfg.icp, key, value)
    pipelines = overrides.pop("pipelines", {})
    mapping = {
        "observation": "observation_pipeline",
        "inner": "inner_pipeline",
        "localmap_create": "localmap_create",
        "localmap_update": "localmap_update",
    }
    for name, stages in pipelines.items():
        if name not in mapping:
            raise ValueError(f"unknown pipeline group {name!r}")
        setattr(cfg, mapping[name], stages_from_config(stages))
    if overrides:
        raise ValueError(f"unknown odometry config keys: {sorted(overrides)}")
    return cfg


def odometry_config_from_dict(doc: Optional[dict]) -> OdometryConfig:
    doc = dict(doc or {})
    preset = doc.pop("preset", LIDAR3D_DEFAULT)
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; available: {sorted(_PRESETS)}")
    return _PRESETS[preset](**doc)


def load_odometry_config(path_or_name: Optional[str]) -> OdometryConfig:
    """A preset name, or a path to a YAML document with optional overrides."""
    if path_or_name is None:
        return lidar3d_default_config()
    if path_or_name in _PRESETS:
        return _PRESETS[path_or_name]()
    with open(path_or_name) as f:
        return odometry_config_from_dict(yaml.safe_load(f))


# ---------------------------------------------------------------------------
# simple-map -> metric-map conversion pipelines


SM2MM_POINTS = "points-merge"
SM2MM_DYNAMIC = "dynamic-removal"

_SM2MM_PRESETS = {
    SM2MM_POINTS: {
        "generators": [
            {
                "type": "generator",
                "output": "map",
                "params": {"layer_type": "points", "from_observation": False},
            }
        ],
        "per_frame": [
            {"type": "generator", "output": "raw"},
            {
                "type": "adjust_timestamps",
                "input": "raw",
                "output": "raw",
                "params": {"convention": "mid_scan_zero", "skip_without_time": True},
            },
            {
                "type": "deskew",
                "inputs": ["raw"],
                "outputs": ["deskewed"],
                "params": {"skip_without_time": True},
            },
            {
                "type": "spatial_split",
                "input": "deskewed",
                "outputs": ["body_filtered"],
                "params": {"predicate": "range", "rmin": 1.0},
            },
            {
                "type": "voxel_downsample",
                "input": "body_filtered",
                "output": "decimated",
                "params": {"resolution": 0.25},
            },
            {"type": "insert_into_map", "input": "decimated", "output": "map"},
        ],
        "final": [],
    },
    SM2MM_DYNAMIC: {
        "generators": [
            {
                "type": "generator",
                "output": "map",
                "params": {"layer_type": "points", "from_observation": False},
            },
            {
                "type": "generator",
                "output": "voxels",
                "params": {
                    "layer_type": "occupancy_voxels",
                    "from_observation": False,
                    "resolution": 0.5,
                },
            },
        ],
        "per_frame": [
            {"type": "generator", "output": "raw"},
            {
                "type": "adjust_timestamps",
                "input": "raw",
                "output": "raw",
                "params": {"convention": "mid_scan_zero", "skip_without_time": True},
            },
            {
                "type": "deskew",
                "inputs": ["raw"],
                "outputs": ["deskewed"],
                "params": {"skip_without_time": True},
            },
            {
                "type": "spatial_split",
                "input": "deskewed",
                "outputs": ["body_filtered"],
                "params": {"predicate": "range", "rmin": 1.0},
            },
            {"type": "insert_into_map", "input": "body_filtered", "output": "map"},
            {
                "type": "voxel_downsample",
                "input": "body_filtered",
                "output": "ray_points",
                "params": {"resolution": 0.5},
            },
            {"type": "insert_into_map", "input": "ray_points", "output": "voxels"},
        ],
        "final": [
            {
                "type": "remove_dynamic",
                "inputs": ["map", "voxels"],
                "outputs": ["static", "dynamic"],
                "params": {"threshold": 0.4},
            }
        ],
    },
}


def sm2mm_preset(name: str) -> dict:
    if name not in _SM2MM_PRESETS:
        raise ValueError(f"unknown sm2mm preset {name!r}; available: {sorted(_SM2MM_PRESETS)}")
    return copy.deepcopy(_SM2MM_PRESETS[name])


def load_sm2mm_config(path_or_name: str) -> dict:
    if path_or_name in _SM2MM_PRESETS:
        return sm2mm_preset(path_or_name)
    with open(path_or_name) as f:
        doc = yaml.safe_load(f)
    if "preset" in doc:
        return sm2mm_preset(doc["preset"])
    return doc
