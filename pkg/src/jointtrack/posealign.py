"""Fixed-transform estimation between two synchronized pose streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import NoPairs, SingularNormalMatrix
from .se3 import RigidTransform, compose, project_to_se3

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class PosePair:
    """``p_r @ T ~= p_m`` for the unknown fixed transform T."""

    p_r: RigidTransform
    p_m: RigidTransform
    frame_index: int = 0


def solve_pose_pairs_raw(pairs: list[PosePair]) -> np.ndarray:
    """Unconstrained 4x4 least-squares solution of ``P_r T = P_m`` over all pairs.

    All sixteen entries of T are free; the normal matrix is factored once and
    the four columns are solved together.
    """
    if not pairs:
        raise NoPairs("no pose pairs to solve from")
    ordered = sorted(pairs, key=lambda pp: pp.frame_index)
    lhs = np.zeros((4, 4))
    rhs = np.zeros((4, 4))
    for pp in ordered:
        a = pp.p_r.matrix
        lhs += a.T @ a
        rhs += a.T @ pp.p_m.matrix
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise SingularNormalMatrix(f"normal matrix is singular (condition {cond:.3g})")
    return lu_solve(lu_factor(lhs), rhs)


def solve_pose_pairs(pairs: list[PosePair]) -> RigidTransform:
    return project_to_se3(solve_pose_pairs_raw(pairs))


def pair_residual(pairs: list[PosePair], t) -> float:
    """Sum of squared Frobenius residuals ``||P_r T - P_m||^2``."""
    m = t.matrix if isinstance(t, RigidTransform) else np.asarray(t)
    return float(sum(np.sum((pp.p_r.matrix @ m - pp.p_m.matrix) ** 2) for pp in pairs))


def compose_marker_to_model(t_refined: RigidTransform, t_hat: RigidTransform) -> RigidTransform:
    """Marker-map frame to reference-model frame: ``t_refined @ t_hat``."""
    return compose(t_refined, t_hat)
