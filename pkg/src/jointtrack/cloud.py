"""Point clouds, meshes, depth images and the operations the pipeline runs on them."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, NonPositiveVoxelSize, TooFewPoints
from .se3 import RigidTransform


def _readonly(a, dtype=float, shape_tail=(3,)) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    if a.size == 0:
        a = a.reshape((0, *shape_tail))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points (N, 3) in meters with optional unit normals (N, 3)."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        p = _readonly(self.points)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = _readonly(self.normals)
            if n.shape != p.shape:
                raise ValueError("normals must match points in shape")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def transformed(self, t: RigidTransform) -> PointCloud:
        normals = None if self.normals is None else self.normals @ t.rotation.T
        return PointCloud(t.apply(self.points), normals)

    def select(self, idx) -> PointCloud:
        idx = np.asarray(idx, dtype=np.int64)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    @staticmethod
    def concatenate(clouds: list[PointCloud]) -> PointCloud:
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.has_normals for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = _readonly(self.vertices)
        f = _readonly(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"triangles must be (M, 3), got {f.shape}")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("triangle index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate triangle (repeated index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        if self.vertex_normals is not None:
            object.__setattr__(self, "vertex_normals", _readonly(self.vertex_normals))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs, i < j."""
        f = self.triangles
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.triangles
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return n

    def compute_vertex_normals(self) -> TriangleMesh:
        """Area-weighted vertex normals; isolated vertices get +z."""
        fn = self.face_normals()
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], fn)
        norm = np.linalg.norm(acc, axis=1)
        bad = norm < 1e-300
        acc[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
        return TriangleMesh(self.vertices, self.triangles, acc / norm[:, None])

    def vertex_cloud(self) -> PointCloud:
        return PointCloud(self.vertices, self.vertex_normals)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.triangles)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        return np.stack(
            [self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy],
            axis=-1,
        )


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Depth in millimeters, 0 = invalid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("depth data must be 2-D (height, width)")
        d = np.array(d, dtype=np.uint16)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@lru_cache(maxsize=8)
def _pixel_rays(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(k.width, dtype=float) - k.cx) / k.fx
    v = (np.arange(k.height, dtype=float) - k.cy) / k.fy
    xs = np.broadcast_to(u[None, :], (k.height, k.width)).ravel()
    ys = np.broadcast_to(v[:, None], (k.height, k.width)).ravel()
    return xs, ys


def depth_to_pointcloud(d: DepthImage, k: CameraIntrinsics) -> PointCloud:
    """Pinhole back-projection of every nonzero pixel, in row-major pixel order."""
    if (d.width, d.height) != (k.width, k.height):
        raise ValueError("depth image size does not match intrinsics")
    flat = d.data.ravel()
    valid = np.flatnonzero(flat)
    z = flat[valid].astype(float) / 1000.0
    xs, ys = _pixel_rays(k)
    pts = np.empty((len(valid), 3))
    pts[:, 0] = xs[valid] * z
    pts[:, 1] = ys[valid] * z
    pts[:, 2] = z
    return PointCloud(pts)


def dynamic_voxel_size(c: PointCloud, n_target: float, d0: float) -> float:
    """``max(cbrt(V / n_target), d0)`` with V the volume of the bounding cube."""
    if len(c) == 0:
        raise EmptyCloud("cannot size voxels for an empty cloud")
    edge = float((c.points.max(axis=0) - c.points.min(axis=0)).max())
    return max((edge**3 / n_target) ** (1.0 / 3.0), d0)


def voxel_indices(points: np.ndarray, size: float, origin: np.ndarray | None = None) -> np.ndarray:
    if origin is None:
        origin = points.min(axis=0)
    return np.floor((points - origin) / size).astype(np.int64)


def voxel_downsample(c: PointCloud, size: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by ascending voxel index.

    The grid origin is the cloud's bounding-box minimum; voxels are half-open.
    """
    if not size > 0:
        raise NonPositiveVoxelSize(f"voxel size must be positive, got {size}")
    if len(c) == 0:
        return c
    pts = c.points
    idx = voxel_indices(pts, size)
    dims = idx.max(axis=0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) < 2**62:
        key = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = len(counts)
    out = np.empty((m, 3))
    for j in range(3):
        out[:, j] = np.bincount(inverse, weights=pts[:, j], minlength=m) / counts
    normals = None
    if c.normals is not None:
        acc = np.empty((m, 3))
        for j in range(3):
            acc[:, j] = np.bincount(inverse, weights=c.normals[:, j], minlength=m)
        norm = np.linalg.norm(acc, axis=1)
        bad = norm < 1e-12
        if np.any(bad):
            first = np.full(m, -1)
            first[inverse[::-1]] = np.arange(len(inverse))[::-1]
            acc[bad] = c.normals[first[bad]]
            norm[bad] = 1.0
        normals = acc / norm[:, None]
    return PointCloud(out, normals)


class KdTree:
    """Exact nearest-neighbor index over a fixed point set."""

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("KdTree needs a non-empty (N, 3) point array")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, q, k: int) -> np.ndarray:
        """Indices of the k nearest points, nearest first, ties by lower index."""
        q = np.asarray(q, dtype=float)
        k = min(int(k), len(self.points))
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        dist, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def radius_search(self, q, r: float) -> np.ndarray:
        """Indices of all points with distance <= r, ascending."""
        q = np.asarray(q, dtype=float)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-12) + 1e-300), dtype=np.int64)
        if len(cand) == 0:
            return cand
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        return np.sort(cand[d <= r])

    def nearest(self, queries, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Batched 1-NN; misses beyond max_distance get index -1 and distance inf."""
        bound = max_distance * (1.0 + 1e-9) if np.isfinite(max_distance) else np.inf
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=1, distance_upper_bound=bound)
        i = np.asarray(i, dtype=np.int64)
        miss = ~(d <= max_distance)
        i[miss] = -1
        d = np.where(miss, np.inf, d)
        return d, i

    def knn_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return d, i


def knn(tree: KdTree, q, k: int) -> np.ndarray:
    return tree.knn(q, k)


def radius_search(tree: KdTree, q, r: float) -> np.ndarray:
    return tree.radius_search(q, r)


def local_covariances(points: np.ndarray, k: int, tree: KdTree | None = None) -> np.ndarray:
    """Covariance of each point's k-nearest-neighbor patch (itself included)."""
    n = len(points)
    k = min(k, n)
    tree = tree or KdTree(points)
    _, nbr = tree.knn_batch(points, k)
    nbr = np.asarray(nbr).reshape(n, k)
    patch = points[nbr]
    centered = patch - patch.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / k


def estimate_normals(c: PointCloud, k: int = 20, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals over k nearest neighbors, oriented toward ``viewpoint``."""
    if len(c) < 3:
        raise TooFewPoints("normal estimation needs at least 3 points")
    if k < 3:
        raise ValueError("k must be at least 3")
    cov = local_covariances(c.points, k)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    towards = np.asarray(viewpoint, dtype=float) - c.points
    flip = np.einsum("ij,ij->i", normals, towards) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(c.points, normals)


def _seeded_clusters(vertices: np.ndarray, edges: np.ndarray, d: float) -> np.ndarray:
    """Greedy clusters grown from seeds over short mesh edges.

    Vertices are visited in index order; an unlabeled vertex seeds a cluster
    which absorbs edge-connected unlabeled vertices lying closer than d to
    the seed. Cluster labels are returned in order of creation.
    """
    n = len(vertices)
    order = np.argsort(np.concatenate([edges[:, 0], edges[:, 1]]), kind="stable")
    nbr_all = np.concatenate([edges[:, 1], edges[:, 0]])[order]
    starts = np.searchsorted(np.concatenate([edges[:, 0], edges[:, 1]])[order], np.arange(n + 1))
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        labels[seed] = next_label
        lo, hi = starts[seed], starts[seed + 1]
        if hi > lo:
            x0 = vertices[seed]
            queue = deque(nbr_all[lo:hi].tolist())
            while queue:
                v = queue.popleft()
                if labels[v] >= 0:
                    continue
                if np.sum((vertices[v] - x0) ** 2) < d * d:
                    labels[v] = next_label
                    queue.extend(nbr_all[starts[v] : starts[v + 1]].tolist())
        next_label += 1
    return labels


def merge_close_vertices(m: TriangleMesh, d: float) -> TriangleMesh:
    """Merge mesh-neighboring vertices closer than d into their centroid.

    Rounds of seeded clustering over mesh edges shorter than d are repeated
    until no such edge remains, so every surviving edge is at least d long.
    Collapsed and duplicated triangles are dropped.
    """
    if d < 0:
        raise ValueError("merge distance must be non-negative")
    vertices = np.array(m.vertices)
    triangles = np.array(m.triangles)
    changed = False
    while d > 0 and len(triangles):
        mesh = TriangleMesh(vertices, triangles)
        edges = mesh.edges()
        length = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
        short = edges[length < d]
        if len(short) == 0:
            break
        labels = _seeded_clusters(vertices, short, d)
        n_new = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=n_new)
        merged = np.empty((n_new, 3))
        for j in range(3):
            merged[:, j] = np.bincount(labels, weights=vertices[:, j], minlength=n_new) / counts
        tri = labels[triangles]
        keep = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
        tri = tri[keep]
        _, first = np.unique(np.sort(tri, axis=1), axis=0, return_index=True)
        tri = tri[np.sort(first)]
        vertices, triangles = merged, tri
        changed = True
    if not changed:
        return m
    out = TriangleMesh(vertices, triangles)
    return out.compute_vertex_normals() if m.vertex_normals is not None else out
