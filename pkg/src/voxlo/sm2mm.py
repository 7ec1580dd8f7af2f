"""Build metric maps from simple maps: generators run once, per-frame filters
run for every key-frame, final filters post-process the result."""

from __future__ import annotations

from typing import Dict, Optional

from voxlo.maps import MetricMap
from voxlo.pipelines import PipelineContext, run_pipeline, stages_from_config
from voxlo.simplemap import SimpleMap, SimpleMapError


def convert_simplemap(
    sm: SimpleMap,
    pipeline_config: dict,
    variables: Optional[Dict[str, float]] = None,
) -> MetricMap:
    """Apply a three-stage pipeline config ({generators, per_frame, final})
    to every key-frame of the simple map."""
    if len(sm) == 0:
        raise SimpleMapError("cannot convert an empty simple map")
    generators = stages_from_config(pipeline_config.get("generators", []))
    per_frame = stages_from_config(pipeline_config.get("per_frame", []))
    final = stages_from_config(pipeline_config.get("final", []))
    mmap = MetricMap()
    if variables:
        mmap.variables.update(variables)
    run_pipeline(generators, mmap, PipelineContext(variables=dict(mmap.variables)))
    for i, kf in enumerate(sm):
        if kf.scan is None:
            continue
        ctx = PipelineContext(
            variables={**mmap.variables, "frame": float(i)},
            pose=kf.pose.mean,
            twist=kf.twist,
            observation=kf.scan,
        )
        run_pipeline(per_frame, mmap, ctx)
    run_pipeline(final, mmap, PipelineContext(variables=dict(mmap.variables)))
    return mmap
