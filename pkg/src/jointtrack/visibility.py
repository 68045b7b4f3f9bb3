"""Point-based visibility culling and neighborhood cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull as _QhullHull
from scipy.spatial import QhullError

from .cloud import KdTree, PointCloud
from .errors import CameraOnPoint, DegenerateInput
from .se3 import RigidTransform


@dataclass(frozen=True, eq=False)
class ConvexHull:
    """Hull vertices (input indices, ascending) and outward-oriented triangles."""

    vertices: np.ndarray
    facets: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray

    def signed_distances(self, points) -> np.ndarray:
        """(N, F) distances of points to each facet plane; positive is outside."""
        return np.asarray(points) @ self.normals.T + self.offsets


def _check_spread(pts: np.ndarray) -> float:
    if len(pts) < 4:
        raise DegenerateInput("a 3-D hull needs at least 4 points")
    diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if diameter == 0.0 or s[2] / np.sqrt(len(pts)) <= 1e-12 * diameter:
        raise DegenerateInput("points are coplanar or collinear")
    return diameter


def quickhull3(points) -> ConvexHull:
    """Exact 3-D convex hull (Qhull's quickhull) with consistently outward facets."""
    pts = np.asarray(points, dtype=float)
    _check_spread(pts)
    try:
        h = _QhullHull(pts)
    except QhullError as exc:
        raise DegenerateInput(str(exc)) from exc
    return _from_qhull(h, pts)


def _from_qhull(h, pts: np.ndarray) -> ConvexHull:
    facets = np.array(h.simplices, dtype=np.int64)
    normals = h.equations[:, :3].copy()
    offsets = h.equations[:, 3].copy()
    a, b, c = pts[facets[:, 0]], pts[facets[:, 1]], pts[facets[:, 2]]
    cross = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", cross, normals) < 0
    facets[flip] = facets[flip][:, [0, 2, 1]]
    return ConvexHull(np.unique(facets), facets, normals, offsets)


def hidden_point_removal(points, camera_pos, radius_exponent: float = 1.0) -> tuple[np.ndarray, bool]:
    """Spherical-flip visibility. Returns (visible indices, jittered flag).

    Points are flipped about a sphere of radius ``10**radius_exponent`` times
    the largest camera-to-point distance; visible points are those whose flipped
    image is a vertex of the hull of the flipped set plus the camera.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 4:
        raise DegenerateInput("visibility needs at least 4 points")
    p = pts - np.asarray(camera_pos, dtype=float)
    norm = np.linalg.norm(p, axis=1)
    if norm.min() <= 1e-9:
        raise CameraOnPoint("camera coincides with a model point")
    radius = 10.0**radius_exponent * norm.max()
    flipped = p + (2.0 * (radius - norm) / norm)[:, None] * p
    cloud = np.vstack([flipped, np.zeros((1, 3))])
    jittered = False
    try:
        hull = _QhullHull(cloud)
    except QhullError:
        # Flat patches: nudge flipped points by a tiny deterministic jitter.
        diameter = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
        rng = np.random.default_rng(0)
        cloud = cloud + rng.uniform(-1.0, 1.0, cloud.shape) * 1e-9 * diameter
        cloud[-1] = 0.0
        try:
            hull = _QhullHull(cloud)
        except QhullError as exc:
            raise DegenerateInput(str(exc)) from exc
        jittered = True
    idx = np.unique(hull.simplices)
    return idx[idx < len(pts)], jittered


def extract_visible_points(model_points, camera_pos, radius_exponent: float = 1.0) -> np.ndarray:
    """Indices of the model points visible from ``camera_pos`` (ascending)."""
    if isinstance(model_points, PointCloud):
        model_points = model_points.points
    return hidden_point_removal(model_points, camera_pos, radius_exponent)[0]


def crop_neighborhood(
    scene: PointCloud,
    model_points,
    t_model_from_camera: RigidTransform,
    d_nei: float,
    *,
    model_tree: KdTree | None = None,
) -> PointCloud:
    """Scene points whose image under the transform lies closer than d_nei to the model."""
    if not d_nei > 0:
        raise ValueError("neighborhood distance must be positive")
    if len(scene) == 0:
        return scene
    if model_tree is None:
        pts = model_points.points if isinstance(model_points, PointCloud) else model_points
        model_tree = KdTree(pts)
    moved = t_model_from_camera.apply(scene.points)
    d, _ = model_tree.nearest(moved)
    return scene.select(np.flatnonzero(d < d_nei))
