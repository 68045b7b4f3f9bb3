"""BVH ray casting against triangle meshes (numba kernels)."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

# Skip the TBB layer: the installed TBB is too old and only produces warnings.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .cloud import CameraIntrinsics, TriangleMesh
from .se3 import RigidTransform

LEAF_SIZE = 4


@numba.njit(cache=True)
def _build(centroids, tri_min, tri_max, leaf_size):
    n = centroids.shape[0]
    max_nodes = 2 * n + 1
    node_min = np.empty((max_nodes, 3))
    node_max = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    order = np.arange(n)
    stack = np.empty((max_nodes, 3), np.int64)  # node, lo, hi
    n_nodes = 1
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    sp = 1
    while sp > 0:
        sp -= 1
        node, lo, hi = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        for j in range(3):
            node_min[node, j] = np.inf
            node_max[node, j] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(lo, hi):
            t = order[i]
            for j in range(3):
                node_min[node, j] = min(node_min[node, j], tri_min[t, j])
                node_max[node, j] = max(node_max[node, j], tri_max[t, j])
                cmin[j] = min(cmin[j], centroids[t, j])
                cmax[j] = max(cmax[j], centroids[t, j])
        if hi - lo <= leaf_size:
            start[node] = lo
            count[node] = hi - lo
            continue
        axis = 0
        ext = cmax - cmin
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        keys = np.empty(hi - lo)
        for i in range(lo, hi):
            keys[i - lo] = centroids[order[i], axis]
        perm = np.argsort(keys, kind="mergesort")
        seg = order[lo:hi].copy()
        for i in range(hi - lo):
            order[lo + i] = seg[perm[i]]
        mid = (lo + hi) // 2
        l_node, r_node = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l_node, r_node
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l_node, lo, mid
        sp += 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = r_node, mid, hi
        sp += 1
    return node_min[:n_nodes], node_max[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


@numba.njit(cache=True, inline="always")
def _slab(o, inv_d, bmin, bmax, t_best):
    t0 = 0.0
    t1 = t_best
    for j in range(3):
        ta = (bmin[j] - o[j]) * inv_d[j]
        tb = (bmax[j] - o[j]) * inv_d[j]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return np.inf
    return t0


@numba.njit(cache=True)
def _cast_one(o, d, v0, e1, e2, node_min, node_max, left, right, start, count, order, stack):
    inv_d = np.empty(3)
    for j in range(3):
        inv_d[j] = 1.0 / d[j] if d[j] != 0.0 else 1e300
    best = np.inf
    sp = 0
    if _slab(o, inv_d, node_min[0], node_max[0], best) == np.inf:
        return best
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _slab(o, inv_d, node_min[node], node_max[node], best) == np.inf:
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                t = order[i]
                # Moller-Trumbore
                px = d[1] * e2[t, 2] - d[2] * e2[t, 1]
                py = d[2] * e2[t, 0] - d[0] * e2[t, 2]
                pz = d[0] * e2[t, 1] - d[1] * e2[t, 0]
                det = e1[t, 0] * px + e1[t, 1] * py + e1[t, 2] * pz
                if abs(det) < 1e-18:
                    continue
                inv = 1.0 / det
                sx = o[0] - v0[t, 0]
                sy = o[1] - v0[t, 1]
                sz = o[2] - v0[t, 2]
                u = (sx * px + sy * py + sz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = sy * e1[t, 2] - sz * e1[t, 1]
                qy = sz * e1[t, 0] - sx * e1[t, 2]
                qz = sx * e1[t, 1] - sy * e1[t, 0]
                v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                tt = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * inv
                if tt > 1e-12 and tt < best:
                    best = tt
        else:
            a, b = left[node], right[node]
            ta = _slab(o, inv_d, node_min[a], node_max[a], best)
            tb = _slab(o, inv_d, node_min[b], node_max[b], best)
            # push the farther child first so the nearer one is popped next
            if ta <= tb:
                if tb < np.inf:
                    stack[sp] = b
                    sp += 1
                if ta < np.inf:
                    stack[sp] = a
                    sp += 1
            else:
                if ta < np.inf:
                    stack[sp] = a
                    sp += 1
                if tb < np.inf:
                    stack[sp] = b
                    sp += 1
    return best


@numba.njit(cache=True, parallel=True)
def _cast_rays(origins, dirs, v0, e1, e2, node_min, node_max, left, right, start, count, order):
    n = origins.shape[0]
    out = np.empty(n)
    for i in numba.prange(n):
        stack = np.empty(128, np.int64)
        out[i] = _cast_one(origins[i], dirs[i], v0, e1, e2, node_min, node_max, left, right, start, count, order, stack)
    return out


@numba.njit(cache=True, parallel=True)
def _cast_image(o, rot, fx, fy, cx, cy, u0, u1, v0_, v1, width, height,
                v0, e1, e2, node_min, node_max, left, right, start, count, order):
    out = np.zeros((height, width))
    for row in numba.prange(v0_, v1):
        stack = np.empty(128, np.int64)
        d = np.empty(3)
        yc = (row - cy) / fy
        for col in range(u0, u1):
            xc = (col - cx) / fx
            for j in range(3):
                d[j] = rot[j, 0] * xc + rot[j, 1] * yc + rot[j, 2]
            t = _cast_one(o, d, v0, e1, e2, node_min, node_max, left, right, start, count, order, stack)
            if t < np.inf:
                out[row, col] = t
    return out


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened bounding-volume hierarchy over a mesh's triangles."""

    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]

    @classmethod
    def build(cls, mesh: TriangleMesh) -> Bvh:
        tri = mesh.vertices[mesh.triangles]
        v0 = np.ascontiguousarray(tri[:, 0])
        e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        if len(tri) == 0:
            empty = np.zeros((0, 3))
            z = np.zeros(0, np.int64)
            return cls(v0, e1, e2, empty, empty, z, z, z, z, z, (np.zeros(3), np.zeros(3)))
        nodes = _build(np.ascontiguousarray(tri.mean(axis=1)), tri.min(axis=1), tri.max(axis=1), LEAF_SIZE)
        return cls(v0, e1, e2, *nodes, (tri.reshape(-1, 3).min(axis=0), tri.reshape(-1, 3).max(axis=0)))

    @property
    def empty(self) -> bool:
        return len(self.v0) == 0

    def _arrays(self):
        return (self.v0, self.e1, self.e2, self.node_min, self.node_max,
                self.left, self.right, self.start, self.count, self.order)

    def cast(self, origins, directions) -> np.ndarray:
        """Ray parameter of the nearest hit (inf on miss); hit = o + t * d."""
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=float)
        d = np.ascontiguousarray(np.atleast_2d(directions), dtype=float)
        o = np.broadcast_to(o, d.shape).copy() if len(o) == 1 else o
        if self.empty:
            return np.full(len(d), np.inf)
        return _cast_rays(o, d, *self._arrays())

    def depth_image(self, mesh_from_camera: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
        """Optical-axis depth (meters) per pixel of a pinhole camera; 0 on miss."""
        if self.empty:
            return np.zeros((k.height, k.width))
        u0, u1, r0, r1 = _pixel_window(self.bounds, mesh_from_camera, k)
        if u1 <= u0 or r1 <= r0:
            return np.zeros((k.height, k.width))
        rot = np.ascontiguousarray(mesh_from_camera.rotation)
        o = np.ascontiguousarray(mesh_from_camera.translation)
        return _cast_image(o, rot, k.fx, k.fy, k.cx, k.cy, u0, u1, r0, r1, k.width, k.height, *self._arrays())


def _pixel_window(bounds, mesh_from_camera: RigidTransform, k: CameraIntrinsics):
    """Pixel rectangle covering the projected mesh bounding box."""
    lo, hi = bounds
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cam = mesh_from_camera.inverse().apply(corners)
    if np.any(cam[:, 2] <= 1e-6):
        return 0, k.width, 0, k.height
    uv = k.project(cam)
    u0 = max(int(np.floor(uv[:, 0].min())) - 1, 0)
    u1 = min(int(np.ceil(uv[:, 0].max())) + 2, k.width)
    r0 = max(int(np.floor(uv[:, 1].min())) - 1, 0)
    r1 = min(int(np.ceil(uv[:, 1].max())) + 2, k.height)
    return u0, u1, r0, r1
