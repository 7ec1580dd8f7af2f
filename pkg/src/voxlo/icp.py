"""Iterative map alignment: pluggable point-to-point matching, a closed-form
Horn solver, a robustified Gauss-Newton solver with an optional SE(3) prior,
per-iteration pipeline hooks, and registration quality evaluators."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from voxlo.expressions import as_expression
from voxlo.geometry import (
    Pose3,
    Rot3,
    quaternion_from_rotation,
    rotation_from_quaternion,
    se3_boxplus,
    se3_log,
    se3_right_jacobian_inv,
    skew,
)
from voxlo.maps import HashedVoxelLayer, MetricMap, OccupancyVoxelLayer, PointCloudLayer
from voxlo.pipelines import PipelineContext, run_pipeline


class IcpError(ValueError):
    pass


class DegenerateGeometryError(IcpError):
    pass


class NoPairingsError(IcpError):
    pass


@dataclasses.dataclass
class Pairings:
    """Point correspondences: local points, their paired global points, and
    per-pair weights; ``local_total`` counts all local points considered."""

    local: np.ndarray
    global_: np.ndarray
    weights: np.ndarray
    local_total: int

    def __post_init__(self):
        self.local = np.asarray(self.local, dtype=float).reshape(-1, 3)
        self.global_ = np.asarray(self.global_, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(self.local) == len(self.global_) == len(self.weights)):
            raise IcpError("pairing arrays must have equal length")
        if not np.all(np.isfinite(self.weights)):
            raise IcpError("pairing weights must be finite")
        if self.local_total < len(self.local):
            raise IcpError("local_total below pair count")

    def __len__(self) -> int:
        return len(self.local)

    @staticmethod
    def empty(local_total: int = 0) -> "Pairings":
        return Pairings(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), local_total)

    @staticmethod
    def concatenate(parts: Sequence["Pairings"]) -> "Pairings":
        if not parts:
            return Pairings.empty()
        return Pairings(
            np.vstack([p.local for p in parts]),
            np.vstack([p.global_ for p in parts]),
            np.concatenate([p.weights for p in parts]),
            sum(p.local_total for p in parts),
        )


@dataclasses.dataclass(frozen=True)
class PosePrior:
    """Gaussian prior on the sought pose (tangent-space covariance,
    translation-first ordering)."""

    mean: Pose3
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float).reshape(6, 6)
        if np.max(np.abs(cov - cov.T)) > 1e-9:
            raise IcpError("prior covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() <= 0.0:
            raise IcpError("prior covariance must be positive definite")
        cov = 0.5 * (cov + cov.T)
        cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)

    @staticmethod
    def from_stds(mean: Pose3, trans_std: float, rot_std: float) -> "PosePrior":
        d = np.array([trans_std] * 3 + [rot_std] * 3, dtype=float) ** 2
        return PosePrior(mean, np.diag(d))

    def information(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


@dataclasses.dataclass
class MatcherConfig:
    """Point-to-point matcher between one local and one global layer."""

    local_layer: str = "points"
    global_layer: str = "points"
    max_dist: Union[str, float, None] = None  # defaults to the sigma variable
    weight: float = 1.0


@dataclasses.dataclass
class QualityConfig:
    kind: str = "paired_ratio"  # or "voxel_occupancy"
    weight: float = 1.0
    local_layer: str = "occupancy"
    global_layer: str = "occupancy"
    kappa: float = 1.0
    discard_threshold: float = 0.2


@dataclasses.dataclass
class IcpConfig:
    max_iterations: int = 300
    eps_p: float = 1e-4
    eps_r: float = 5e-5
    kernel: str = "geman_mcclure"  # or "none"
    kernel_scale: Union[str, float, None] = None  # defaults to sigma
    gn_inner_iterations: int = 2
    sigma: Union[str, float] = 1.0
    matchers: List[MatcherConfig] = dataclasses.field(default_factory=lambda: [MatcherConfig()])
    quality: List[QualityConfig] = dataclasses.field(
        default_factory=lambda: [QualityConfig("paired_ratio")]
    )
    strict_no_pairs: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise IcpError("max_iterations must be >= 1")
        if self.eps_p <= 0 or self.eps_r <= 0:
            raise IcpError("convergence thresholds must be > 0")
        if self.kernel not in ("none", "geman_mcclure"):
            raise IcpError(f"unknown kernel {self.kernel!r}")


@dataclasses.dataclass
class IcpResult:
    pose: Pose3
    quality: float
    iterations: int
    converged: bool
    final_hessian: np.ndarray
    pairings: Optional[Pairings] = None


# ---------------------------------------------------------------------------
# matching


def _layer_points(layer) -> np.ndarray:
    if isinstance(layer, PointCloudLayer):
        return layer.xyz
    if isinstance(layer, HashedVoxelLayer):
        return layer.points_in_insertion_order()
    raise IcpError(f"cannot match against layer type {type(layer).__name__}")


def match_point_to_point(
    local_layer,
    global_layer,
    t: Pose3,
    max_dist: float,
    weight: float = 1.0,
    workers: int = 1,
) -> Pairings:
    """Pair every local point with its transformed nearest neighbor in the
    global layer within max_dist; all pairings get the same weight."""
    pts = _layer_points(local_layer)
    if len(pts) == 0:
        raise IcpError("empty local layer")
    found, nn_pts, _, _ = global_layer.nearest_neighbors(t.apply(pts), max_dist, workers=workers)
    n = int(found.sum())
    return Pairings(pts[found], nn_pts[found], np.full(n, float(weight)), len(pts))


# ---------------------------------------------------------------------------
# solvers


def solve_horn(pairings: Pairings) -> Pose3:
    """Closed-form optimum of the weighted L2 registration cost (no scale),
    via the quaternion eigenvector method."""
    if len(pairings) < 3:
        raise DegenerateGeometryError("need at least 3 pairings")
    w = pairings.weights
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateGeometryError("non-positive total weight")
    l_mean = (w[:, None] * pairings.local).sum(0) / wsum
    g_mean = (w[:, None] * pairings.global_).sum(0) / wsum
    lc = pairings.local - l_mean
    gc = pairings.global_ - g_mean
    m = (w[:, None] * lc).T @ gc
    # quaternion N-matrix (Horn 1987)
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    eigval, eigvec = np.linalg.eigh(n)
    if eigval[-1] - eigval[-2] < 1e-12 * max(1.0, abs(eigval[-1])):
        raise DegenerateGeometryError("rank-deficient pairing configuration")
    q = eigvec[:, -1]  # (w, x, y, z)
    rot = Rot3(rotation_from_quaternion(np.array([q[1], q[2], q[3], q[0]])))
    return Pose3(rot, g_mean - rot.apply(l_mean))


def geman_mcclure_weight(r2: np.ndarray, scale: float) -> np.ndarray:
    s2 = scale * scale
    return (s2 / (s2 + r2)) ** 2


def robust_rho(r2: np.ndarray, kernel: str, scale: float) -> np.ndarray:
    if kernel == "none":
        return r2
    s2 = scale * scale
    return s2 * r2 / (s2 + r2)


def registration_cost(
    pairings: Pairings,
    prior: Optional[PosePrior],
    t: Pose3,
    kernel: str = "none",
    kernel_scale: float = 1.0,
) -> float:
    """0.5 * (prior Mahalanobis + sum of (robustified) squared pair errors)."""
    total = 0.0
    if len(pairings):
        e = t.apply(pairings.local) - pairings.global_
        r2 = np.einsum("ij,ij->i", e, e)
        total += float(np.sum(pairings.weights * robust_rho(r2, kernel, kernel_scale)))
    if prior is not None:
        ep = se3_log(prior.mean.inverse() @ t)
        total += float(ep @ prior.information() @ ep)
    return 0.5 * total


def _assemble_normal_equations(
    pairings: Pairings,
    prior: Optional[PosePrior],
    t: Pose3,
    kernel: str,
    kernel_scale: float,
) -> Tuple[np.ndarray, np.ndarray]:
    h = np.zeros((6, 6))
    g = np.zeros(6)
    if len(pairings):
        e = t.apply(pairings.local) - pairings.global_
        r2 = np.einsum("ij,ij->i", e, e)
        if kernel == "none":
            s = pairings.weights
        else:
            s = pairings.weights * np.sqrt(geman_mcclure_weight(r2, kernel_scale))
        r = t.rot.m
        n = len(pairings)
        jac = np.empty((n, 3, 6))
        jac[:, :, :3] = r
        skews = np.zeros((n, 3, 3))
        lx, ly, lz = pairings.local[:, 0], pairings.local[:, 1], pairings.local[:, 2]
        skews[:, 0, 1] = -lz
        skews[:, 0, 2] = ly
        skews[:, 1, 0] = lz
        skews[:, 1, 2] = -lx
        skews[:, 2, 0] = -ly
        skews[:, 2, 1] = lx
        jac[:, :, 3:] = -np.einsum("ab,nbc->nac", r, skews)
        h += np.einsum("n,nia,nib->ab", s, jac, jac)
        g += np.einsum("n,nia,ni->a", s, jac, e)
    if prior is not None:
        ep = se3_log(prior.mean.inverse() @ t)
        jp = se3_right_jacobian_inv(ep)
        info = prior.information()
        h += jp.T @ info @ jp
        g += jp.T @ info @ ep
    return h, g


def _solve_spd(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= 0.0 or eig[0] < 1e-12 * eig[-1]:
        raise DegenerateGeometryError(
            f"degenerate geometry: Hessian conditioning {eig[0]:.3e} / {eig[-1]:.3e}"
        )
    l = np.linalg.cholesky(h)
    return np.linalg.solve(l.T, np.linalg.solve(l, -g))


def solve_gn_robust(
    pairings: Pairings,
    prior: Optional[PosePrior],
    t_init: Pose3,
    cfg: IcpConfig,
    kernel_scale: Optional[float] = None,
) -> Tuple[Pose3, np.ndarray]:
    """Run cfg.gn_inner_iterations Gauss-Newton steps on the robustified cost
    (prior term un-robustified); returns the final pose and Hessian."""
    if len(pairings) == 0 and prior is None:
        raise NoPairingsError("no pairings and no prior")
    if kernel_scale is None:
        kernel_scale = as_expression(cfg.kernel_scale if cfg.kernel_scale is not None else cfg.sigma).evaluate({})
    t = t_init
    h = np.zeros((6, 6))
    for _ in range(max(1, cfg.gn_inner_iterations)):
        h, g = _assemble_normal_equations(pairings, prior, t, cfg.kernel, kernel_scale)
        xi = _solve_spd(h, g)
        t = se3_boxplus(t, xi)
    return t, h


# ---------------------------------------------------------------------------
# quality evaluators


def quality_paired_ratio(pairings: Pairings) -> float:
    if pairings.local_total <= 0:
        raise IcpError("paired ratio undefined for zero local points")
    return len(pairings) / pairings.local_total


def occupancy_pair_loss(p_i: np.ndarray, p_j: np.ndarray) -> np.ndarray:
    """Heuristic voxel-occupancy agreement score: high for matching evidence,
    strongly negative for contradictions."""
    return 1.5 + p_i + p_j - 12.0 * p_i**2 + 22.0 * p_i * p_j - 12.0 * p_j**2


def quality_voxel_occupancy(
    a: OccupancyVoxelLayer,
    b: OccupancyVoxelLayer,
    t: Pose3,
    kappa: float = 1.0,
    discard_threshold: float = 0.2,
) -> Tuple[float, bool]:
    """Compare the occupancy of every voxel of ``a`` against the voxel of
    ``b`` containing its transformed center; unobserved voxels count as 0.5."""
    if abs(a.resolution - b.resolution) > 1e-12:
        raise IcpError("occupancy layers must share one resolution")
    centers, occ_a = a.occupancies()
    if len(centers) == 0:
        raise IcpError("no voxels to compare")
    occ_b = b.occupancy_at_points(t.apply(centers))
    d = float(np.sum(occupancy_pair_loss(occ_a, occ_b)))
    q = 1.0 / (1.0 + math.exp(-kappa * d / len(centers)))
    return q, q < discard_threshold


def _evaluate_quality(
    cfg: IcpConfig, local: MetricMap, global_: MetricMap, t: Pose3, pairings: Pairings
) -> float:
    total = 0.0
    wsum = 0.0
    bad = False
    for q in cfg.quality:
        if q.kind == "paired_ratio":
            qi, bad_i = quality_paired_ratio(pairings), False
        elif q.kind == "voxel_occupancy":
            qi, bad_i = quality_voxel_occupancy(
                local.layer(q.local_layer),
                global_.layer(q.global_layer),
                t,
                kappa=q.kappa,
                discard_threshold=q.discard_threshold,
            )
        else:
            raise IcpError(f"unknown quality evaluator {q.kind!r}")
        total += q.weight * qi
        wsum += q.weight
        bad = bad or bad_i
    if bad or wsum <= 0.0:
        return 0.0
    return min(1.0, max(0.0, total / wsum))


# ---------------------------------------------------------------------------
# the ICP loop


InnerHook = Callable[[Pose3, int, Dict[str, float]], None]


def align(
    local: MetricMap,
    global_: MetricMap,
    t0: Pose3,
    prior: Optional[PosePrior] = None,
    cfg: Optional[IcpConfig] = None,
    inner_pipeline: Union[None, Sequence, InnerHook] = None,
    env: Optional[Dict[str, float]] = None,
    log_sink: Optional[Callable[[dict], None]] = None,
    pairing_filter: Optional[Callable[[Pairings], Pairings]] = None,
    workers: int = 1,
) -> IcpResult:
    """Iterate match/solve until the pose increment falls below the
    translation and rotation thresholds, then evaluate alignment quality.

    ``inner_pipeline`` may be a stage list applied to the local map after
    each solve, or a callable ``hook(T, iteration, env)``.
    """
    cfg = cfg or IcpConfig()
    base_env: Dict[str, float] = {}
    base_env.update(global_.variables)
    base_env.update(local.variables)
    if env:
        base_env.update(env)
    sigma_expr = as_expression(cfg.sigma)
    t = t0
    pairings = Pairings.empty()
    converged = False
    hessian = np.zeros((6, 6))
    iterations = 0
    for k in range(cfg.max_iterations):
        iterations = k + 1
        it_env = dict(base_env)
        it_env["icp_iteration"] = float(k)
        sigma = sigma_expr.evaluate(it_env)
        it_env["sigma"] = sigma
        parts = []
        for m in cfg.matchers:
            max_dist = as_expression(m.max_dist if m.max_dist is not None else "sigma").evaluate(it_env)
            parts.append(
                match_point_to_point(
                    local.layer(m.local_layer),
                    global_.layer(m.global_layer),
                    t,
                    max_dist,
                    weight=m.weight,
                    workers=workers,
                )
            )
        pairings = Pairings.concatenate(parts)
        if pairing_filter is not None:
            pairings = pairing_filter(pairings)
        if len(pairings) == 0 and prior is None:
            if cfg.strict_no_pairs:
                raise NoPairingsError("no pairings found and no prior available")
            return IcpResult(t, 0.0, iterations, False, hessian, pairings)
        kernel_scale = as_expression(
            cfg.kernel_scale if cfg.kernel_scale is not None else "sigma"
        ).evaluate(it_env)
        t_new, hessian = solve_gn_robust(pairings, prior, t, cfg, kernel_scale=kernel_scale)
        if inner_pipeline is not None:
            if callable(inner_pipeline):
                inner_pipeline(t_new, k, it_env)
            else:
                run_pipeline(inner_pipeline, local, PipelineContext(variables=it_env, pose=t_new))
        dp = t.translation_to(t_new)
        dr = t.rotation_to(t_new)
        if log_sink is not None:
            q = quaternion_from_rotation(t_new.rot.m)
            log_sink(
                {
                    "iteration": k,
                    "pose": [*map(float, t_new.trans), *map(float, q)],
                    "pairs": len(pairings),
                    "sigma": float(sigma),
                    "cost": registration_cost(pairings, prior, t_new, cfg.kernel, kernel_scale),
                }
            )
        t = t_new
        if dp < cfg.eps_p and dr < cfg.eps_r:
            converged = True
            break
    quality = _evaluate_quality(cfg, local, global_, t, pairings)
    return IcpResult(t, quality, iterations, converged, hessian, pairings)
