"""Camera pose from marker-corner correspondences (PnP).

The pose returned is ``camera_from_map``: it maps marker-map coordinates into
the camera frame. Initialization is either a caller-supplied prior or a
normalized DLT; refinement is Gauss-Newton on pixel reprojection error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import CameraIntrinsics
from .errors import DegenerateRotation
from .se3 import RigidTransform, from_twist, nearest_rotation, project_to_se3
from .simulate import MarkerMap

logger = logging.getLogger(__name__)

MIN_MARKERS = 2
MAX_MEAN_ERROR_PX = 2.0
INLIER_PX = 2.0
MAX_ITERATIONS = 20
PLANAR_RATIO = 1e-3


@dataclass(frozen=True)
class PoseEstimate:
    pose: RigidTransform
    success: bool
    mean_reprojection_error: float
    inlier_corner_count: int
    cost_trace: tuple[float, ...] = field(default=(), compare=False)


def gather_correspondences(mmap: MarkerMap, detections) -> tuple[np.ndarray, np.ndarray, int]:
    """Stack (3-D corners, pixels, marker count) for detections present in the map."""
    used = [d for d in detections if d.id in mmap.markers]
    if not used:
        return np.zeros((0, 3)), np.zeros((0, 2)), 0
    obj = np.concatenate([mmap.markers[d.id] for d in used])
    img = np.concatenate([np.asarray(d.corners, dtype=float).reshape(4, 2) for d in used])
    return obj, img, len({d.id for d in used})


def _project(pose: RigidTransform, obj: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    cam = pose.apply(obj)
    return cam, k.project(cam)


def corner_errors(mmap: MarkerMap, detections, k: CameraIntrinsics, pose: RigidTransform) -> np.ndarray:
    obj, img, _ = gather_correspondences(mmap, detections)
    if len(obj) == 0:
        return np.zeros(0)
    _, uv = _project(pose, obj, k)
    return np.linalg.norm(uv - img, axis=1)


def reprojection_error(mmap: MarkerMap, detections, k: CameraIntrinsics, pose: RigidTransform) -> float:
    """Root-mean-square pixel distance over all detected corners (0 when none)."""
    e = corner_errors(mmap, detections, k, pose)
    return float(np.sqrt(np.mean(e * e))) if len(e) else 0.0


def _hartley(obj: np.ndarray) -> np.ndarray:
    c = obj.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.linalg.norm(obj - c, axis=1).mean(), 1e-12)
    t = np.eye(4)
    t[:3, :3] *= scale
    t[:3, 3] = -scale * c
    return t


def _dlt(obj: np.ndarray, img_n: np.ndarray) -> RigidTransform | None:
    """Linear 3x4 projection fit on normalized image coordinates."""
    t = _hartley(obj)
    xh = np.hstack([obj, np.ones((len(obj), 1))]) @ t.T
    n = len(obj)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -img_n[:, :1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -img_n[:, 1:2] * xh
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4) @ t
    det = np.linalg.det(p[:, :3])
    if abs(det) < 1e-300:
        return None
    scale = np.cbrt(det)
    m = np.eye(4)
    m[:3, :] = p / scale
    try:
        return project_to_se3(m)
    except DegenerateRotation:
        return None


def _planar(obj: np.ndarray, img_n: np.ndarray) -> RigidTransform | None:
    """Homography decomposition for (near-)coplanar corners."""
    c = obj.mean(axis=0)
    _, _, vt = np.linalg.svd(obj - c)
    plane_rot = vt.T  # columns: in-plane x, in-plane y, normal
    if np.linalg.det(plane_rot) < 0:
        plane_rot[:, 2] *= -1
    xy = (obj - c) @ plane_rot[:, :2]
    n = len(obj)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2], a[0::2, 2] = xy, 1.0
    a[0::2, 6:8], a[0::2, 8] = -img_n[:, :1] * xy, -img_n[:, 0]
    a[1::2, 3:5], a[1::2, 5] = xy, 1.0
    a[1::2, 6:8], a[1::2, 8] = -img_n[:, 1:2] * xy, -img_n[:, 1]
    h = np.linalg.svd(a)[2][-1].reshape(3, 3)
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] * lam < 0:
        lam = -lam
    r1, r2 = lam * h[:, 0], lam * h[:, 1]
    try:
        rot = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    except DegenerateRotation:
        return None
    camera_from_plane = RigidTransform(rot, lam * h[:, 2])
    plane_from_map = RigidTransform(plane_rot.T, -plane_rot.T @ c)
    return camera_from_plane @ plane_from_map


def initial_pose(obj: np.ndarray, img: np.ndarray, k: CameraIntrinsics) -> RigidTransform | None:
    img_n = np.column_stack([(img[:, 0] - k.cx) / k.fx, (img[:, 1] - k.cy) / k.fy])
    s = np.linalg.svd(obj - obj.mean(axis=0), compute_uv=False)
    if s[0] == 0:
        return None
    if s[2] / s[0] < PLANAR_RATIO:
        return _planar(obj, img_n)
    return _dlt(obj, img_n)


def _cost(pose: RigidTransform, obj, img, k) -> float:
    cam, uv = _project(pose, obj, k)
    if np.any(cam[:, 2] <= 0):
        return np.inf
    r = uv - img
    return float(np.sum(r * r))


def refine_pose(obj: np.ndarray, img: np.ndarray, k: CameraIntrinsics, init: RigidTransform,
                max_iterations: int = MAX_ITERATIONS) -> tuple[RigidTransform, list[float]]:
    """Gauss-Newton on summed squared reprojection error, left-perturbation update."""
    pose = init
    cost = _cost(pose, obj, img, k)
    trace = [cost]
    if not np.isfinite(cost):
        return pose, trace
    for _ in range(max_iterations):
        cam, uv = _project(pose, obj, k)
        r = (uv - img).ravel()
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        # d(uv)/d(cam) per corner, then d(cam)/d(omega, v) = [-[cam]x, I]
        du = np.zeros((len(obj), 2, 3))
        du[:, 0, 0] = k.fx / z
        du[:, 0, 2] = -k.fx * x / z**2
        du[:, 1, 1] = k.fy / z
        du[:, 1, 2] = -k.fy * y / z**2
        dp = np.zeros((len(obj), 3, 6))
        dp[:, 0, 1], dp[:, 0, 2] = z, -y
        dp[:, 1, 0], dp[:, 1, 2] = -z, x
        dp[:, 2, 0], dp[:, 2, 1] = y, -x
        dp[:, :, 3:] = np.eye(3)
        jac = np.einsum("nij,njk->nik", du, dp).reshape(-1, 6)
        try:
            step = -np.linalg.solve(jac.T @ jac, jac.T @ r)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(jac, r, rcond=None)[0]
        alpha = 1.0
        for _ in range(9):
            cand = from_twist(alpha * step) @ pose
            new_cost = _cost(cand, obj, img, k)
            if new_cost <= cost:
                break
            alpha *= 0.5
        else:
            break
        pose, cost = cand, new_cost
        trace.append(cost)
        if np.linalg.norm(alpha * step) < 1e-12:
            break
    return pose, trace


def estimate_pose(mmap: MarkerMap, detections, k: CameraIntrinsics,
                  prior: RigidTransform | None = None, min_markers: int = MIN_MARKERS) -> PoseEstimate:
    """camera_from_map pose; failure is reported through ``success``, never raised."""
    obj, img, n_markers = gather_correspondences(mmap, detections)
    fail = PoseEstimate(prior or RigidTransform.identity(), False, 0.0, 0)
    if n_markers < min_markers or len(obj) < 4 * min_markers:
        return fail
    starts = [prior] if prior is not None else []
    result = None
    for attempt in range(2):
        init = starts[0] if attempt == 0 and starts else initial_pose(obj, img, k)
        if init is None:
            continue
        pose, trace = refine_pose(obj, img, k, init)
        cam, uv = _project(pose, obj, k)
        err = np.linalg.norm(uv - img, axis=1)
        mean_err = float(err.mean())
        ok = bool(np.all(cam[:, 2] > 0) and mean_err <= MAX_MEAN_ERROR_PX)
        result = PoseEstimate(pose, ok, mean_err, int(np.sum(err <= INLIER_PX)), tuple(trace))
        if ok or not starts or attempt == 1:
            break
        logger.debug("prior-seeded PnP failed (mean error %.2f px); retrying from DLT", mean_err)
    return result if result is not None else fail
