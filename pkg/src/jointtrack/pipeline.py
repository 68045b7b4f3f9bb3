"""Body reconstruction, marker-map and model alignment, and per-frame tracking.

Pose naming follows ``a_from_b`` (see ``se3``). The frames involved:

* world  -- the scene map the scene tracker localizes the camera in.
* map    -- the body-attached marker map.
* model  -- the reference surface model of the body.

Scene poses from the frames are ``camera_from_world``; marker estimates are
``camera_from_map``; the tracked patient pose is ``camera_from_model``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cloud import (CameraIntrinsics, KdTree, PointCloud, TriangleMesh, depth_to_pointcloud,
                    dynamic_voxel_size, merge_close_vertices, voxel_downsample)
from .errors import AlignmentFailed, DegenerateInput, NoCorrespondences, NoPairs, NoUsableFrames, TooFewPoints
from .markerpose import estimate_pose
from .posealign import PosePair, compose_marker_to_model, solve_pose_pairs
from .registration import (IcpParams, IcpResult, find_correspondences, generalized_icp,
                           gicp_pair_objective, median_spacing, point_to_plane_icp, regularized_covariances)
from .se3 import RigidTransform, inverse
from .simulate import Frame, MarkerMap
from .visibility import crop_neighborhood, extract_visible_points

logger = logging.getLogger(__name__)

STAGES = ("marker", "cloud", "visibility", "crop", "refine", "total")


@dataclass(frozen=True)
class ReconstructionParams:
    frame_skip: int = 10
    n_target: float = 5e4
    d0: float = 0.01
    d_recon: float = 0.01
    icp: IcpParams = IcpParams()

    def __post_init__(self) -> None:
        for name in ("frame_skip", "n_target", "d0", "d_recon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ReconstructionParams.{name} must be positive")


@dataclass(frozen=True)
class TrackingParams:
    d_star: float = 0.01
    d_nei: float = 0.04
    icp: IcpParams = IcpParams()
    hpr_radius_exponent: float = 1.0

    def __post_init__(self) -> None:
        if not (self.d_star > 0 and self.d_nei > 0):
            raise ValueError("TrackingParams distances must be positive")

    @classmethod
    def xtion(cls, **kw) -> TrackingParams:
        return cls(d_star=0.02, d_nei=0.10, **kw)


@dataclass(frozen=True)
class AlignParams:
    """Point-to-plane settings for registering the reconstruction to the model."""

    icp: IcpParams = IcpParams(max_iterations=60, max_correspondence_distance=0.05)


@dataclass
class ReconstructionResult:
    cloud: PointCloud  # in the world frame
    poses: dict[int, RigidTransform]  # camera_from_world per used frame
    t_hat: RigidTransform  # world_from_map
    used: list[int]
    succeeded: list[int]
    marker_poses: dict[int, RigidTransform] = field(default_factory=dict)


def used_frame_indices(indices, frame_skip: int) -> list[int]:
    """Frame 1 plus every multiple of the skip constant (1-based indices)."""
    return [i for i in indices if i == 1 or i % frame_skip == 0]


def reconstruct_body(frames, k: CameraIntrinsics, marker_map: MarkerMap,
                     p: ReconstructionParams | None = None) -> ReconstructionResult:
    """Accumulate a world-frame body cloud from a scanning sequence and align the marker map to it.

    ``frames`` is any iterable of ``Frame``; frames outside the used set are skipped.
    """
    p = p or ReconstructionParams()
    acc: PointCloud | None = None
    poses: dict[int, RigidTransform] = {}
    marker_poses: dict[int, RigidTransform] = {}
    used: list[int] = []
    for frame in frames:
        i = frame.index
        if not (i == 1 or i % p.frame_skip == 0):
            continue
        if not frame.scene_valid:
            logger.info("frame %d: scene pose invalid, skipped", i)
            continue
        raw = depth_to_pointcloud(frame.depth, k)
        if len(raw) == 0:
            logger.info("frame %d: empty depth, skipped", i)
            continue
        cloud = voxel_downsample(raw, dynamic_voxel_size(raw, p.n_target, p.d0))
        scene = frame.scene_pose
        if acc is None:
            pose = scene
        else:
            try:
                res = generalized_icp(cloud, acc, inverse(scene), p.icp)
                pose = inverse(res.transform)
            except (NoCorrespondences, TooFewPoints) as exc:
                logger.warning("frame %d: refinement failed (%s); using scene pose", i, exc)
                pose = scene
        poses[i] = pose
        used.append(i)
        world = cloud.transformed(inverse(pose))
        acc = voxel_downsample(world if acc is None else PointCloud.concatenate([acc, world]), p.d_recon)
        est = estimate_pose(marker_map, frame.detections, k)
        if est.success:
            marker_poses[i] = est.pose
        logger.debug("frame %d: cloud %d pts, accumulated %d, marker %s", i, len(cloud), len(acc), est.success)
    if acc is None:
        raise NoUsableFrames("no used frame had a valid scene pose and depth")
    succeeded = sorted(marker_poses)
    try:
        t_hat = solve_pose_pairs([PosePair(poses[i], marker_poses[i], i) for i in succeeded])
    except NoPairs as exc:
        raise AlignmentFailed("marker map was never detected in a used frame") from exc
    return ReconstructionResult(acc, poses, t_hat, used, succeeded, marker_poses)


def align_reference_model(recon: PointCloud, model: TriangleMesh, t_manual: RigidTransform,
                          icp: IcpParams | None = None) -> IcpResult:
    """Refine the manual world-to-model guess with point-to-plane ICP onto the model vertices.

    The returned ``transform`` is ``model_from_world``; check ``converged`` for
    the far-from-basin case.
    """
    if len(recon) == 0:
        raise NoUsableFrames("reconstruction cloud is empty")
    if len(model.vertices) < 3:
        raise TooFewPoints("reference model needs at least 3 vertices")
    if model.vertex_normals is None:
        model = model.compute_vertex_normals()
    target = PointCloud(model.vertices, model.vertex_normals)
    return point_to_plane_icp(recon, target, t_manual, icp or AlignParams().icp)


class TrackStatus(str, Enum):
    TRACKING = "Tracking"
    HOLDING = "HoldingLastPose"
    AWAITING = "AwaitingAcquisition"


@dataclass
class TrackerState:
    """Mutable per-session tracking state; use one per sequence."""

    marker_to_model: RigidTransform  # model_from_map
    model: TriangleMesh  # merged reference model
    reference_pose: RigidTransform  # desired world_from_model
    marker_map: MarkerMap
    intrinsics: CameraIntrinsics
    last_pose: RigidTransform | None = None  # camera_from_model
    last_frame: int | None = None
    last_marker_pose: RigidTransform | None = None
    acquired: bool = False
    _model_tree: KdTree | None = field(default=None, repr=False)
    _model_cov: np.ndarray | None = field(default=None, repr=False)
    _max_distance: float | None = field(default=None, repr=False)

    @property
    def model_points(self) -> np.ndarray:
        return self.model.vertices


@dataclass
class TrackResult:
    frame_index: int
    status: TrackStatus
    patient_pose: RigidTransform | None = None  # camera_from_model
    scene_pose: RigidTransform | None = None  # camera_from_world
    adjustment: RigidTransform | None = None
    rotational_error_deg: float | None = None
    translational_error_mm: float | None = None
    timings_us: dict[str, float] = field(default_factory=dict)
    degraded: bool = False
    marker_success: bool = False

    @property
    def world_pose(self) -> RigidTransform | None:
        """Patient pose in the scene map (world_from_model), when both poses exist."""
        if self.patient_pose is None or self.scene_pose is None:
            return None
        return inverse(self.scene_pose) @ self.patient_pose


def init_tracker(t_hat, t_refined: RigidTransform, model: TriangleMesh, p_u_ref: RigidTransform,
                 tp: TrackingParams | None = None, *, marker_map: MarkerMap,
                 intrinsics: CameraIntrinsics) -> TrackerState:
    """Compose the marker-to-model transform and merge model vertices once."""
    tp = tp or TrackingParams()
    if isinstance(t_hat, ReconstructionResult):
        t_hat = t_hat.t_hat
    merged = merge_close_vertices(model, tp.d_star)
    state = TrackerState(compose_marker_to_model(t_refined, t_hat), merged, p_u_ref, marker_map, intrinsics)
    pts = merged.vertices
    state._model_tree = KdTree(pts)
    k = min(tp.icp.neighbors_for_covariance, len(pts))
    state._model_cov = regularized_covariances(pts, k, tp.icp.gicp_covariance_epsilon, state._model_tree)
    state._max_distance = tp.icp.max_correspondence_distance or 3.0 * median_spacing(pts, state._model_tree)
    logger.info("tracker model: %d -> %d vertices after merging at %.3g m", len(model.vertices), len(pts), tp.d_star)
    return state


def adjustment_pose(patient_pose: RigidTransform, scene_pose: RigidTransform,
                    reference_pose: RigidTransform) -> tuple[RigidTransform, float, float]:
    """Adjustment transform and its (degrees, millimeters) magnitudes."""
    adj = patient_pose @ inverse(scene_pose @ reference_pose)
    return adj, float(np.degrees(adj.angle)), float(np.linalg.norm(adj.translation) * 1000.0)


def _refine(state: TrackerState, scene_cloud: PointCloud, primary: RigidTransform,
            tp: TrackingParams, timings: dict) -> tuple[RigidTransform, bool]:
    """Visibility, crop and GICP refinement of the primary pose; returns (pose, degraded)."""
    t_star = inverse(primary)  # model_from_camera
    t0 = time.perf_counter_ns()
    try:
        visible = extract_visible_points(state.model_points, t_star.translation, tp.hpr_radius_exponent)
    except DegenerateInput as exc:
        logger.warning("visibility failed: %s", exc)
        visible = np.arange(len(state.model_points))
    t1 = time.perf_counter_ns()
    target_pts = state.model_points[visible]
    target_tree = KdTree(target_pts)
    crop = crop_neighborhood(scene_cloud, target_pts, t_star, tp.d_nei, model_tree=target_tree)
    t2 = time.perf_counter_ns()
    timings["visibility"] = (t1 - t0) / 1e3
    timings["crop"] = (t2 - t1) / 1e3
    k = tp.icp.neighbors_for_covariance
    if len(crop) < k or len(target_pts) < k:
        timings["refine"] = 0.0
        return primary, True
    target_cov = state._model_cov[visible]
    params = tp.icp
    if params.max_correspondence_distance is None:
        params = IcpParams(**{**params.__dict__, "max_correspondence_distance": state._max_distance})
    source_cov = regularized_covariances(crop.points, k, params.gicp_covariance_epsilon)
    try:
        res = generalized_icp(crop, PointCloud(target_pts), t_star, params, source_covariances=source_cov,
                              target_covariances=target_cov, target_tree=target_tree)
    except (NoCorrespondences, TooFewPoints) as exc:
        logger.warning("refinement failed: %s", exc)
        timings["refine"] = (time.perf_counter_ns() - t2) / 1e3
        return primary, True
    corr = find_correspondences(res.transform.apply(crop.points), target_tree, params.max_correspondence_distance)
    f_refined = gicp_pair_objective(crop.points, target_pts, source_cov, target_cov, corr, res.transform)
    f_primary = gicp_pair_objective(crop.points, target_pts, source_cov, target_cov, corr, t_star)
    timings["refine"] = (time.perf_counter_ns() - t2) / 1e3
    if f_refined > f_primary:
        return primary, True
    return inverse(res.transform), False


def track_frame(state: TrackerState, frame: Frame, tp: TrackingParams | None = None) -> TrackResult:
    """One tracking step; updates ``state`` in place."""
    tp = tp or TrackingParams()
    timings: dict[str, float] = {s: 0.0 for s in STAGES}
    start = time.perf_counter_ns()
    scene = frame.scene_pose if frame.scene_valid else None
    est = estimate_pose(state.marker_map, frame.detections, state.intrinsics, prior=state.last_marker_pose)
    t_marker = time.perf_counter_ns()
    timings["marker"] = (t_marker - start) / 1e3
    if est.success:
        primary = est.pose @ inverse(state.marker_to_model)
        status = TrackStatus.TRACKING
        state.last_marker_pose = est.pose
        state.acquired = True
    elif state.acquired:
        primary = state.last_pose
        status = TrackStatus.HOLDING
    else:
        timings["total"] = (time.perf_counter_ns() - start) / 1e3
        return TrackResult(frame.index, TrackStatus.AWAITING, scene_pose=scene, timings_us=timings)

    raw = depth_to_pointcloud(frame.depth, state.intrinsics)
    cloud = voxel_downsample(raw, tp.d_star) if len(raw) else raw
    timings["cloud"] = (time.perf_counter_ns() - t_marker) / 1e3
    if len(cloud):
        pose, degraded = _refine(state, cloud, primary, tp, timings)
    else:
        pose, degraded = primary, True
    state.last_pose = pose
    state.last_frame = frame.index
    result = TrackResult(frame.index, status, pose, scene, timings_us=timings, degraded=degraded,
                         marker_success=est.success)
    if scene is not None:
        result.adjustment, result.rotational_error_deg, result.translational_error_mm = adjustment_pose(
            pose, scene, state.reference_pose)
    timings["total"] = (time.perf_counter_ns() - start) / 1e3
    return result


def track_sequence(state: TrackerState, frames, tp: TrackingParams | None = None) -> list[TrackResult]:
    return [track_frame(state, f, tp) for f in frames]
