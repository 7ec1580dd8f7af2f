"""Metric map layers: contiguous point clouds, voxel-hashed point maps, and
log-odds occupancy voxel grids, behind one nearest-neighbor/insertion surface.

All layers share the voxel indexing convention ``floor(p / resolution)`` and
are single-writer: mutation invalidates cached search structures, while
concurrent read-only queries are safe.
"""

from __future__ import annotations

import itertools
import math
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree


class MapError(ValueError):
    """Invalid operation on a map layer."""


class EmptyLayerError(MapError):
    pass


class MissingLayerError(KeyError):
    pass


# 21 bits per axis packed into an int64; spans ~+-1e6 voxels per axis.
_KEY_OFFSET = 1 << 20
_KEY_SPAN = 1 << 21


def voxel_index(p, resolution: float) -> np.ndarray:
    """Integer voxel index of point(s): component-wise floor(p / resolution)."""
    if resolution <= 0:
        raise MapError("resolution must be > 0")
    return np.floor(np.asarray(p, dtype=float) / resolution).astype(np.int64)


def encode_voxel_keys(idx) -> np.ndarray:
    """Pack integer 3-indices into collision-free, order-preserving int64 keys."""
    idx = np.asarray(idx, dtype=np.int64)
    shifted = idx + _KEY_OFFSET
    if np.any(shifted < 0) or np.any(shifted >= _KEY_SPAN):
        raise MapError("voxel index out of supported range")
    flat = shifted.reshape(-1, 3)
    keys = (flat[:, 0] << 42) | (flat[:, 1] << 21) | flat[:, 2]
    return keys.reshape(idx.shape[:-1])


def decode_voxel_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> 42) & (_KEY_SPAN - 1)
    out[:, 1] = (keys >> 21) & (_KEY_SPAN - 1)
    out[:, 2] = keys & (_KEY_SPAN - 1)
    return out - _KEY_OFFSET


def _as_points(p) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise MapError(f"expected (N, 3) points, got shape {a.shape}")
    return a


class PointCloudLayer:
    """Point cloud with contiguous per-channel storage.

    Optional parallel channels: ``intensity`` (unitless), ``ring`` (int),
    ``time`` (seconds relative to the scan reference).
    """

    kind = "points"

    def __init__(self, xyz=None, intensity=None, ring=None, time=None):
        self.xyz = _as_points(xyz) if xyz is not None else np.zeros((0, 3))
        self.intensity = None if intensity is None else np.asarray(intensity, dtype=float).reshape(-1)
        self.ring = None if ring is None else np.asarray(ring, dtype=np.int32).reshape(-1)
        self.time = None if time is None else np.asarray(time, dtype=float).reshape(-1)
        for name in ("intensity", "ring", "time"):
            ch = getattr(self, name)
            if ch is not None and len(ch) != len(self.xyz):
                raise MapError(f"channel {name} length {len(ch)} != point count {len(self.xyz)}")
        self._tree: Optional[cKDTree] = None

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def channels(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in ("intensity", "ring", "time"):
            ch = getattr(self, name)
            if ch is not None:
                out[name] = ch
        return out

    def select(self, mask_or_idx) -> "PointCloudLayer":
        kw = {k: v[mask_or_idx] for k, v in self.channels.items()}
        return PointCloudLayer(self.xyz[mask_or_idx], **kw)

    def copy(self) -> "PointCloudLayer":
        kw = {k: v.copy() for k, v in self.channels.items()}
        return PointCloudLayer(self.xyz.copy(), **kw)

    def transformed(self, pose) -> "PointCloudLayer":
        out = self.copy()
        out.xyz = pose.apply(out.xyz)
        return out

    def extend(self, other: "PointCloudLayer") -> None:
        if len(other) == 0:
            return
        common = set(self.channels) & set(other.channels) if len(self) else set(other.channels)
        merged = {}
        for name in common:
            merged[name] = np.concatenate([self.channels[name], other.channels[name]]) if len(self) else other.channels[name].copy()
        self.xyz = np.vstack([self.xyz, other.xyz]) if len(self) else other.xyz.copy()
        for name in ("intensity", "ring", "time"):
            setattr(self, name, merged.get(name))
        self._tree = None

    def _ensure_tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.xyz)
        return self._tree

    def nearest_neighbors(self, queries, max_dist: float, workers: int = 1):
        """Batch NN: (found, points, distances, indices) for each query."""
        if max_dist <= 0:
            raise MapError("max_dist must be > 0")
        q = _as_points(queries)
        n = len(q)
        if len(self) == 0:
            return (
                np.zeros(n, dtype=bool),
                np.zeros((n, 3)),
                np.full(n, np.inf),
                np.full(n, -1, dtype=np.int64),
            )
        dist, idx = self._ensure_tree().query(
            q, k=1, distance_upper_bound=max_dist * (1.0 + 1e-12), workers=workers
        )
        found = np.isfinite(dist) & (dist <= max_dist)
        idx = np.where(found, idx, -1)
        pts = np.where(found[:, None], self.xyz[np.where(found, idx, 0)], 0.0)
        return found, pts, np.where(found, dist, np.inf), idx.astype(np.int64)

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise EmptyLayerError("bounding box of an empty point layer")
        return self.xyz.min(axis=0), self.xyz.max(axis=0)


class HashedVoxelLayer:
    """Point map stored in hashed voxels with a bounded point count per voxel.

    Insertion keeps first arrivals (reject-new once a voxel is full).  The
    neighborhood NN search visits the ceil(max_dist / resolution)-neighborhood
    of the query's voxel, which contains every point within max_dist.
    """

    kind = "hashed_voxels"

    def __init__(self, resolution: float, max_points_per_voxel: int = 20):
        if resolution <= 0:
            raise MapError("resolution must be > 0")
        if max_points_per_voxel < 1:
            raise MapError("max_points_per_voxel must be >= 1")
        self.resolution = float(resolution)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self._counts: Dict[int, int] = {}
        self._point_chunks: list = []
        self._key_chunks: list = []
        self._n_points = 0
        self._packed = None

    def __len__(self) -> int:
        return self._n_points

    @property
    def point_count(self) -> int:
        return self._n_points

    @property
    def voxel_count(self) -> int:
        return len(self._counts)

    def clear(self) -> None:
        self._counts.clear()
        self._point_chunks.clear()
        self._key_chunks.clear()
        self._n_points = 0
        self._packed = None

    def insert(self, p) -> bool:
        """Insert one point; False when its voxel is already full."""
        return bool(self.insert_points(np.asarray(p, dtype=float).reshape(1, 3))[0])

    def insert_points(self, points) -> np.ndarray:
        """Insert a batch in order; returns the per-point accepted mask."""
        pts = _as_points(points)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        if not np.all(np.isfinite(pts)):
            raise MapError("non-finite point coordinates")
        keys = encode_voxel_keys(voxel_index(pts, self.resolution))
        order = np.argsort(keys, kind="stable")
        skeys = keys[order]
        uniq, start, counts = np.unique(skeys, return_index=True, return_counts=True)
        rank = np.arange(len(skeys)) - np.repeat(start, counts)
        existing = np.fromiter(
            (self._counts.get(int(k), 0) for k in uniq), dtype=np.int64, count=len(uniq)
        )
        allowed = np.maximum(self.max_points_per_voxel - existing, 0)
        accept_sorted = rank < np.repeat(allowed, counts)
        accepted = np.empty(len(pts), dtype=bool)
        accepted[order] = accept_sorted
        taken = np.minimum(counts, allowed)
        for k, t in zip(uniq.tolist(), taken.tolist()):
            if t:
                self._counts[k] = self._counts.get(k, 0) + t
        if accepted.any():
            self._point_chunks.append(pts[accepted].copy())
            self._key_chunks.append(keys[accepted])
            self._n_points += int(accepted.sum())
            self._packed = None
        return accepted

    def points_in_insertion_order(self) -> np.ndarray:
        if not self._point_chunks:
            return np.zeros((0, 3))
        return np.vstack(self._point_chunks)

    def as_point_cloud(self) -> PointCloudLayer:
        return PointCloudLayer(self.points_in_insertion_order())

    def voxel_points(self, idx3) -> np.ndarray:
        """Points stored in one voxel, in insertion order (for inspection)."""
        key = int(encode_voxel_keys(np.asarray(idx3, dtype=np.int64)))
        pts = self.points_in_insertion_order()
        if len(pts) == 0:
            return np.zeros((0, 3))
        keys = np.concatenate(self._key_chunks)
        return pts[keys == key]

    def _ensure_packed(self):
        if self._packed is None:
            pts = self.points_in_insertion_order()
            keys = np.concatenate(self._key_chunks) if self._key_chunks else np.zeros(0, dtype=np.int64)
            order = np.argsort(keys, kind="stable")
            skeys = keys[order]
            uniq, start, counts = np.unique(skeys, return_index=True, return_counts=True)
            cap = int(counts.max()) if len(counts) else 1
            dense = np.full((len(uniq), cap, 3), np.inf)
            dense_idx = np.full((len(uniq), cap), np.iinfo(np.int64).max, dtype=np.int64)
            rows = np.repeat(np.arange(len(uniq)), counts)
            cols = np.arange(len(skeys)) - np.repeat(start, counts)
            dense[rows, cols] = pts[order]
            dense_idx[rows, cols] = order
            self._packed = (uniq, dense, dense_idx)
        return self._packed

    def nearest_neighbors(self, queries, max_dist: float, workers: int = 1):
        """Batch NN over the voxel neighborhood; ties go to the lowest
        insertion index.  Returns (found, points, distances, indices)."""
        if max_dist <= 0:
            raise MapError("max_dist must be > 0")
        q = _as_points(queries)
        n = len(q)
        best_d2 = np.full(n, np.inf)
        best_idx = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        best_pt = np.zeros((n, 3))
        if self._n_points == 0 or n == 0:
            return np.zeros(n, dtype=bool), best_pt, np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
        uniq, dense, dense_idx = self._ensure_packed()
        qvox = voxel_index(q, self.resolution)
        reach = int(math.ceil(max_dist / self.resolution))
        for off in itertools.product(range(-reach, reach + 1), repeat=3):
            cand = encode_voxel_keys(qvox + np.asarray(off, dtype=np.int64))
            pos = np.searchsorted(uniq, cand)
            pos_c = np.minimum(pos, len(uniq) - 1)
            valid = uniq[pos_c] == cand
            if not valid.any():
                continue
            rows = pos_c[valid]
            cpts = dense[rows]  # (V, cap, 3) with inf padding
            diff = cpts - q[valid][:, None, :]
            d2 = np.einsum("vpk,vpk->vp", diff, diff)
            col = np.argmin(d2, axis=1)  # first minimum = lowest insertion index within voxel
            vidx = np.arange(len(rows))
            cand_d2 = d2[vidx, col]
            cand_idx = dense_idx[rows, col]
            cand_pt = cpts[vidx, col]
            sel = np.where(valid)[0]
            better = (cand_d2 < best_d2[sel]) | (
                (cand_d2 == best_d2[sel]) & (cand_idx < best_idx[sel])
            )
            upd = sel[better]
            best_d2[upd] = cand_d2[better]
            best_idx[upd] = cand_idx[better]
            best_pt[upd] = cand_pt[better]
        dist = np.sqrt(best_d2)
        found = dist <= max_dist
        return (
            found,
            np.where(found[:, None], best_pt, 0.0),
            np.where(found, dist, np.inf),
            np.where(found, best_idx, -1),
        )

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self._counts:
            raise EmptyLayerError("bounding box of an empty voxel layer")
        idx = decode_voxel_keys(np.fromiter(self._counts.keys(), dtype=np.int64, count=len(self._counts)))
        return idx.min(axis=0) * self.resolution, (idx.max(axis=0) + 1) * self.resolution


class OccupancyVoxelLayer:
    """Sparse log-odds occupancy grid over hashed voxels."""

    kind = "occupancy_voxels"

    def __init__(
        self,
        resolution: float,
        l_occ: float = 0.6,
        l_free: float = -0.3,
        l_min: float = -4.0,
        l_max: float = 4.0,
    ):
        if resolution <= 0:
            raise MapError("resolution must be > 0")
        self.resolution = float(resolution)
        self.l_occ = float(l_occ)
        self.l_free = float(l_free)
        self.l_min = float(l_min)
        self.l_max = float(l_max)
        self._logodds: Dict[int, float] = {}
        self._packed = None
        self._occupied_cloud: Optional[PointCloudLayer] = None

    @property
    def voxel_count(self) -> int:
        return len(self._logodds)

    def _bump(self, keys: np.ndarray, counts: np.ndarray, delta: float) -> None:
        for k, c in zip(keys.tolist(), counts.tolist()):
            val = self._logodds.get(k, 0.0) + c * delta
            self._logodds[k] = min(self.l_max, max(self.l_min, val))
        if len(keys):
            self._packed = None
            self._occupied_cloud = None

    def update_ray(self, origin, endpoint) -> None:
        self.update_rays(origin, np.asarray(endpoint, dtype=float).reshape(1, 3))

    def update_rays(self, origin, endpoints) -> None:
        """Trace rays with a 3D DDA: every voxel strictly before the endpoint
        voxel gets l_free, the endpoint voxel gets l_occ, clamped."""
        ends = _as_points(endpoints)
        n = len(ends)
        if n == 0:
            return
        orig = np.broadcast_to(np.asarray(origin, dtype=float).reshape(-1, 3), (n, 3)).astype(float)
        if not (np.all(np.isfinite(orig)) and np.all(np.isfinite(ends))):
            raise MapError("non-finite ray coordinates")
        if np.any(np.all(orig == ends, axis=1)):
            raise MapError("ray origin equals endpoint")
        res = self.resolution
        cur = voxel_index(orig, res)
        last = voxel_index(ends, res)
        d = ends - orig
        step = np.sign(d).astype(np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            boundary = (cur + (step > 0)) * res
            tmax = np.where(d != 0.0, (boundary - orig) / d, np.inf)
            tdelta = np.where(d != 0.0, step * res / d, np.inf)
        free_keys = []
        active = ~np.all(cur == last, axis=1)
        if active.any():
            free_keys.append(encode_voxel_keys(cur[active]))
        max_steps = int(np.abs(last - cur).sum(axis=1).max()) + 3
        rows = np.arange(n)
        for _ in range(max_steps):
            if not active.any():
                break
            axis = np.argmin(tmax, axis=1)
            sel = rows[active]
            ax = axis[active]
            cur[sel, ax] += step[sel, ax]
            tmax[sel, ax] += tdelta[sel, ax]
            arrived = np.all(cur == last, axis=1)
            moving = active & ~arrived
            if moving.any():
                free_keys.append(encode_voxel_keys(cur[moving]))
            active = moving
        if free_keys:
            fk = np.concatenate(free_keys)
            uk, cnt = np.unique(fk, return_counts=True)
            self._bump(uk, cnt, self.l_free)
        ok, ocnt = np.unique(encode_voxel_keys(last), return_counts=True)
        self._bump(ok, ocnt, self.l_occ)

    def logodds(self, idx3) -> float:
        key = int(encode_voxel_keys(np.asarray(idx3, dtype=np.int64)))
        return self._logodds.get(key, 0.0)

    def occupancy(self, idx3) -> float:
        return 1.0 / (1.0 + math.exp(-self.logodds(idx3)))

    def _ensure_packed(self):
        if self._packed is None:
            keys = np.fromiter(self._logodds.keys(), dtype=np.int64, count=len(self._logodds))
            vals = np.fromiter(self._logodds.values(), dtype=float, count=len(self._logodds))
            order = np.argsort(keys)
            self._packed = (keys[order], vals[order])
        return self._packed

    def logodds_at_keys(self, keys: np.ndarray) -> np.ndarray:
        """Vectorized lookup; unobserved voxels report 0 log-odds."""
        keys = np.asarray(keys, dtype=np.int64)
        out = np.zeros(keys.shape, dtype=float)
        if not self._logodds:
            return out
        skeys, svals = self._ensure_packed()
        pos = np.searchsorted(skeys, keys)
        pos_c = np.minimum(pos, len(skeys) - 1)
        hit = skeys[pos_c] == keys
        out[hit] = svals[pos_c[hit]]
        return out

    def occupancy_at_points(self, points) -> np.ndarray:
        """Occupancy of the voxels containing the points (0.5 if unobserved)."""
        pts = _as_points(points)
        keys = encode_voxel_keys(voxel_index(pts, self.resolution))
        return 1.0 / (1.0 + np.exp(-self.logodds_at_keys(keys)))

    def voxel_indices(self) -> np.ndarray:
        keys = np.fromiter(self._logodds.keys(), dtype=np.int64, count=len(self._logodds))
        return decode_voxel_keys(np.sort(keys))

    def occupied_centers(self) -> np.ndarray:
        """Centers of voxels with occupancy above 0.5, in sorted key order."""
        skeys, svals = self._ensure_packed()
        occ = skeys[svals > 0.0]
        return (decode_voxel_keys(occ) + 0.5) * self.resolution

    def nearest_neighbors(self, queries, max_dist: float, workers: int = 1):
        """NN over occupied voxel centers (lets scans register against an
        occupancy map layer)."""
        if max_dist <= 0:
            raise MapError("max_dist must be > 0")
        if self._occupied_cloud is None:
            self._occupied_cloud = PointCloudLayer(self.occupied_centers())
        return self._occupied_cloud.nearest_neighbors(_as_points(queries), max_dist, workers=workers)

    def occupancies(self) -> Tuple[np.ndarray, np.ndarray]:
        """(voxel centers, occupancy values) over all observed voxels."""
        skeys, svals = self._ensure_packed()
        centers = (decode_voxel_keys(skeys) + 0.5) * self.resolution
        return centers, 1.0 / (1.0 + np.exp(-svals))

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self._logodds:
            raise EmptyLayerError("bounding box of an empty occupancy layer")
        idx = self.voxel_indices()
        return idx.min(axis=0) * self.resolution, (idx.max(axis=0) + 1) * self.resolution


Layer = (PointCloudLayer, HashedVoxelLayer, OccupancyVoxelLayer)


class MetricMap:
    """Named collection of map layers plus the dynamic-variable environment."""

    def __init__(self):
        self.layers: Dict[str, object] = {}
        self.variables: Dict[str, float] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def layer(self, name: str):
        try:
            return self.layers[name]
        except KeyError:
            raise MissingLayerError(f"map has no layer {name!r}") from None

    def set_layer(self, name: str, layer) -> None:
        self.layers[name] = layer

    def drop_layer(self, name: str) -> None:
        self.layers.pop(name, None)

    def layer_names(self) -> Iterable[str]:
        return self.layers.keys()


def nn_search(layer, q, max_dist: float):
    """Single-query nearest neighbor: (point, distance) or None."""
    found, pts, dist, _ = layer.nearest_neighbors(np.asarray(q, dtype=float).reshape(1, 3), max_dist)
    if not found[0]:
        return None
    return pts[0], float(dist[0])


def hashed_insert(layer: HashedVoxelLayer, p) -> bool:
    return layer.insert(p)


def occupancy_update_ray(layer: OccupancyVoxelLayer, origin, endpoint) -> None:
    layer.update_ray(origin, endpoint)


def bounding_box(layer) -> Tuple[np.ndarray, np.ndarray]:
    return layer.bounding_box()
