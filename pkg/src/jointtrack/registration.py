"""Rigid registration: point-to-plane ICP and plane-to-plane generalized ICP.

Both solvers run Gauss-Newton over a 6-vector increment ``(omega, v)`` that is
composed on the left of the current estimate, ``T <- from_twist(delta) @ T``.
Correspondences (nearest target point within ``max_correspondence_distance``)
are recomputed at the start of every iteration and held fixed while the step
is chosen, so each accepted step never increases that iteration's objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import KdTree, PointCloud, local_covariances
from .errors import MissingNormals, NoCorrespondences, TooFewPoints
from .se3 import RigidTransform, exp_so3, from_twist

logger = logging.getLogger(__name__)

MAX_HALVINGS = 8


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 30
    # None: three times the target's median nearest-neighbor spacing
    max_correspondence_distance: float | None = None
    translation_epsilon: float = 1e-5
    rotation_epsilon: float = 1e-5
    gicp_covariance_epsilon: float = 1e-3
    neighbors_for_covariance: int = 20

    def __post_init__(self) -> None:
        for name in ("max_iterations", "translation_epsilon", "rotation_epsilon",
                     "gicp_covariance_epsilon", "neighbors_for_covariance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IcpParams.{name} must be positive")
        if self.max_correspondence_distance is not None and not self.max_correspondence_distance > 0:
            raise ValueError("IcpParams.max_correspondence_distance must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    final_objective: float
    iterations: int
    converged: bool
    correspondence_count: int
    # (objective before step, objective after step) per accepted iteration,
    # both evaluated on that iteration's correspondence set
    trace: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class Correspondences:
    source: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.source)


def median_spacing(points: np.ndarray, tree: KdTree | None = None) -> float:
    if len(points) < 2:
        return 0.0
    tree = tree or KdTree(points)
    d, _ = tree.knn_batch(points, 2)
    return float(np.median(d[:, 1]))


def find_correspondences(moved_source: np.ndarray, tree: KdTree, max_distance: float) -> Correspondences:
    _, idx = tree.nearest(moved_source, max_distance)
    ok = np.flatnonzero(idx >= 0)
    return Correspondences(ok, idx[ok])


def _skew_batch(q: np.ndarray) -> np.ndarray:
    s = np.zeros((len(q), 3, 3))
    s[:, 0, 1], s[:, 0, 2] = -q[:, 2], q[:, 1]
    s[:, 1, 0], s[:, 1, 2] = q[:, 2], -q[:, 0]
    s[:, 2, 0], s[:, 2, 1] = -q[:, 1], q[:, 0]
    return s


def _apply_increment(delta: np.ndarray, q: np.ndarray) -> np.ndarray:
    return q @ exp_so3(delta[:3]).T + delta[3:]


def point_to_plane_objective(q, t, n, delta=None, with_derivatives=True):
    """Sum of squared plane distances of points ``q`` (already transformed).

    With ``delta`` given, ``q`` is first moved by ``from_twist(delta)``.
    Returns ``(f, gradient, gauss_newton_hessian)`` w.r.t. a left increment.
    """
    if delta is not None:
        q = _apply_increment(delta, q)
    r = np.einsum("ij,ij->i", q - t, n)
    f = float(r @ r)
    if not with_derivatives:
        return f, None, None
    jac = np.hstack([np.cross(q, n), n])
    return f, 2.0 * jac.T @ r, 2.0 * jac.T @ jac


def gicp_objective(q, t, info, delta=None, with_derivatives=True):
    """Sum of Mahalanobis residuals ``d^T M d`` with ``d = q - t``, M fixed."""
    if delta is not None:
        q = _apply_increment(delta, q)
    d = q - t
    md = np.matmul(info, d[:, :, None])[:, :, 0]
    f = float(np.einsum("ni,ni->", d, md))
    if not with_derivatives:
        return f, None, None
    # J = [-[q]x, I]; J^T M d and J^T M J assembled blockwise.
    g_rot = np.cross(q, md).sum(axis=0)
    g_trans = md.sum(axis=0)
    sq = _skew_batch(q)
    m_sq = np.matmul(info, sq)
    h = np.empty((6, 6))
    h[:3, :3] = -np.matmul(sq, m_sq).sum(axis=0)
    h[:3, 3:] = np.matmul(sq, info).sum(axis=0)
    h[3:, :3] = h[:3, 3:].T
    h[3:, 3:] = info.sum(axis=0)
    return f, 2.0 * np.concatenate([g_rot, g_trans]), 2.0 * h


def regularized_covariances(points: np.ndarray, k: int, eps: float, tree: KdTree | None = None) -> np.ndarray:
    """Plane-like covariances: PCA frame of the k-NN patch, eigenvalues (eps, 1, 1)."""
    cov = local_covariances(points, k, tree)
    _, vecs = np.linalg.eigh(cov)
    scale = np.array([eps, 1.0, 1.0])
    return np.einsum("nik,k,njk->nij", vecs, scale, vecs)


def _solve_step(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (h + h.T))
    keep = w > max(w.max(), 0.0) * 1e-12
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return -(v * inv) @ (v.T @ g)


def _gauss_newton(source_pts, tree, init, params, max_dist, evaluate, label):
    """Shared iteration loop; ``evaluate(q, corr, rotation)`` returns an objective closure."""
    t = init
    trace: list[tuple[float, float]] = []
    converged = False
    iterations = 0
    n_corr = 0
    for it in range(params.max_iterations):
        q_all = t.apply(source_pts)
        corr = find_correspondences(q_all, tree, max_dist)
        n_corr = len(corr)
        if n_corr == 0:
            if it == 0:
                raise NoCorrespondences(f"{label}: no target point within {max_dist:.4g} m")
            break
        objective = evaluate(q_all[corr.source], corr, t.rotation)
        f0, g, h = objective(None, True)
        step = _solve_step(h, g)
        iterations = it + 1
        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            f1, _, _ = objective(alpha * step, False)
            if f1 <= f0:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = bool(np.linalg.norm(step[:3]) < params.rotation_epsilon
                             and np.linalg.norm(step[3:]) < params.translation_epsilon)
            break
        delta = alpha * step
        t = from_twist(delta) @ t
        trace.append((f0, f1))
        if np.linalg.norm(delta[:3]) < params.rotation_epsilon and np.linalg.norm(delta[3:]) < params.translation_epsilon:
            converged = True
            break
    q_all = t.apply(source_pts)
    corr = find_correspondences(q_all, tree, max_dist)
    final = evaluate(q_all[corr.source], corr, t.rotation)(None, False)[0] if len(corr) else 0.0
    logger.debug("%s: %d iterations, converged=%s, objective=%.6g", label, iterations, converged, final)
    return IcpResult(t, final, iterations, converged, len(corr), trace)


def point_to_plane_icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    p: IcpParams | None = None,
    *,
    target_tree: KdTree | None = None,
) -> IcpResult:
    """Align ``source`` onto ``target`` (which must carry normals)."""
    p = p or IcpParams()
    init = init or RigidTransform.identity()
    if target.normals is None:
        raise MissingNormals("point-to-plane ICP needs target normals")
    if len(source) == 0 or len(target) == 0:
        raise NoCorrespondences("empty source or target cloud")
    tree = target_tree or KdTree(target.points)
    max_dist = p.max_correspondence_distance or 3.0 * median_spacing(target.points, tree)
    tp, tn = target.points, target.normals

    def evaluate(q, corr, _rotation):
        t, n = tp[corr.target], tn[corr.target]
        return lambda delta, deriv: point_to_plane_objective(q, t, n, delta, deriv)

    return _gauss_newton(source.points, tree, init, p, max_dist, evaluate, "point_to_plane_icp")


def _inv_sym3(a: np.ndarray) -> np.ndarray:
    """Batched inverse of symmetric positive-definite 3x3 matrices via the adjugate."""
    a00, a01, a02 = a[:, 0, 0], a[:, 0, 1], a[:, 0, 2]
    a11, a12, a22 = a[:, 1, 1], a[:, 1, 2], a[:, 2, 2]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    inv_det = 1.0 / (a00 * c00 + a01 * c01 + a02 * c02)
    out = np.empty_like(a)
    out[:, 0, 0], out[:, 1, 1], out[:, 2, 2] = c00 * inv_det, c11 * inv_det, c22 * inv_det
    out[:, 0, 1] = out[:, 1, 0] = c01 * inv_det
    out[:, 0, 2] = out[:, 2, 0] = c02 * inv_det
    out[:, 1, 2] = out[:, 2, 1] = c12 * inv_det
    return out


def gicp_information(cov_source, cov_target, rotation) -> np.ndarray:
    combined = cov_target + np.matmul(np.matmul(rotation, cov_source), rotation.T)
    return _inv_sym3(combined)


def generalized_icp(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    p: IcpParams | None = None,
    *,
    source_covariances: np.ndarray | None = None,
    target_covariances: np.ndarray | None = None,
    target_tree: KdTree | None = None,
) -> IcpResult:
    """Plane-to-plane generalized ICP aligning ``source`` onto ``target``.

    Precomputed covariances (regularized, in each cloud's own frame) may be
    passed to skip the k-NN PCA step.
    """
    p = p or IcpParams()
    init = init or RigidTransform.identity()
    k = p.neighbors_for_covariance
    if len(source) < k or len(target) < k:
        raise TooFewPoints(f"generalized ICP needs at least {k} points in each cloud")
    tree = target_tree or KdTree(target.points)
    if source_covariances is None:
        source_covariances = regularized_covariances(source.points, k, p.gicp_covariance_epsilon)
    if target_covariances is None:
        target_covariances = regularized_covariances(target.points, k, p.gicp_covariance_epsilon, tree)
    max_dist = p.max_correspondence_distance or 3.0 * median_spacing(target.points, tree)
    tp = target.points

    def evaluate(q, corr, rotation):
        info = gicp_information(source_covariances[corr.source], target_covariances[corr.target], rotation)
        t = tp[corr.target]
        return lambda delta, deriv: gicp_objective(q, t, info, delta, deriv)

    return _gauss_newton(source.points, tree, init, p, max_dist, evaluate, "generalized_icp")


def gicp_pair_objective(
    source_points: np.ndarray,
    target_points: np.ndarray,
    source_covariances: np.ndarray,
    target_covariances: np.ndarray,
    corr: Correspondences,
    transform: RigidTransform,
) -> float:
    """GICP objective of ``transform`` over a fixed correspondence set."""
    if len(corr) == 0:
        return 0.0
    q = transform.apply(source_points[corr.source])
    info = gicp_information(source_covariances[corr.source], target_covariances[corr.target], transform.rotation)
    return gicp_objective(q, target_points[corr.target], info, None, False)[0]
