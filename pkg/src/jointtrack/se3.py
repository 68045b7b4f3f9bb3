"""Rigid-motion arithmetic on SE(3).

Conventions:
    A ``RigidTransform`` named ``a_from_b`` maps coordinates expressed in frame
    ``b`` into frame ``a``: ``p_a = R @ p_b + t``. Composition ``compose(a, b)``
    is the matrix product ``a @ b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateRotation

ORTHO_TOL = 1e-9
_Z_AXIS = np.array([0.0, 0.0, 1.0])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation plus translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError(f"rotation is not in SO(3) (orthonormality error {err:.3g})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        """Build from an exact 4x4 rigid matrix (no projection)."""
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        return inverse(self)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    @property
    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return rotation_angle(self.rotation)

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(t=[{q}], angle={math.degrees(self.angle):.4g} deg)"


@dataclass(frozen=True)
class AngleAxis:
    axis: tuple[float, float, float]
    angle: float

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.axis) * self.angle


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def nearest_rotation(m) -> np.ndarray:
    """Polar factor of a 3x3 matrix; raises if it is not a proper rotation."""
    m = np.asarray(m, dtype=float)
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-9:
        raise DegenerateRotation(f"rotation block is rank deficient (sigma_min={s[-1]:.3g})")
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise DegenerateRotation("rotation block has negative determinant")
    return r


def rotation_angle(r) -> float:
    r = np.asarray(r, dtype=float)
    s = 0.5 * math.sqrt(
        (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2
    )
    c = 0.5 * (np.trace(r) - 1.0)
    return math.atan2(s, c)


def _canonical_sign(axis: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(axis)))
    return -axis if axis[k] < 0 else axis


def to_angle_axis(r) -> AngleAxis:
    """Axis and angle of (the polar factor of) a near-rotation matrix.

    The angle lies in [0, pi]. The identity reports axis +z. At exactly pi the
    axis sign is fixed so its largest-magnitude component is positive.
    """
    r = nearest_rotation(r)
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = float(np.linalg.norm(w))
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if cos_t > -0.5:
        if sin_t == 0.0:
            return AngleAxis((0.0, 0.0, 1.0), 0.0)
        axis = w / sin_t
    else:
        # Near pi the skew part vanishes; use the symmetric part (1 - cos) a a^T.
        b = 0.5 * (r + r.T) - cos_t * np.eye(3)
        k = int(np.argmax(np.diag(b)))
        axis = b[:, k] / math.sqrt(max(b[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if sin_t > 1e-12:
            if np.dot(axis, w) < 0:
                axis = -axis
        else:
            axis = _canonical_sign(axis)
    axis = axis / np.linalg.norm(axis)
    return AngleAxis(tuple(float(v) for v in axis), float(theta))


def from_angle_axis(aa: AngleAxis | tuple) -> np.ndarray:
    """Rodrigues formula."""
    if not isinstance(aa, AngleAxis):
        aa = AngleAxis(*aa)
    if aa.angle == 0.0:
        return np.eye(3)
    a = np.asarray(aa.axis, dtype=float)
    a = a / np.linalg.norm(a)
    k = skew(a)
    s, c = math.sin(aa.angle), math.cos(aa.angle)
    r = np.eye(3) + s * k + (1.0 - c) * (k @ k)
    return r


def exp_so3(omega) -> np.ndarray:
    """Rotation matrix of a rotation vector (axis * angle)."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-8:
        # Second-order series; exact enough below 1e-8 rad.
        k = skew(omega)
        r = np.eye(3) + k + 0.5 * (k @ k)
        return nearest_rotation(r)
    return from_angle_axis(AngleAxis(tuple(omega / theta), theta))


def log_so3(r) -> np.ndarray:
    aa = to_angle_axis(r)
    return aa.vector


def from_twist(xi) -> RigidTransform:
    """Increment from a 6-vector ``(omega, v)``: rotation exp(omega), translation v."""
    xi = np.asarray(xi, dtype=float)
    return RigidTransform(exp_so3(xi[:3]), xi[3:])


def project_to_se3(m) -> RigidTransform:
    """Nearest-rigid-motion projection of an arbitrary 4x4 matrix.

    The rotation block is polar-decomposed, then passed through an angle-axis
    round trip; the translation column is kept and the bottom row discarded.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
    aa = to_angle_axis(m[:3, :3])
    r = from_angle_axis(aa)
    return RigidTransform(r, m[:3, 3].copy())


def rotation_distance_deg(a: RigidTransform, b: RigidTransform) -> float:
    return math.degrees(rotation_angle(a.rotation.T @ b.rotation))


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return nearest_rotation(Rotation.from_quat(q).as_matrix())


def random_transform(rng: np.random.Generator, translation_scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=translation_scale, size=3))


def perturbation(translation: float, angle_deg: float, rng: np.random.Generator) -> RigidTransform:
    """Rigid motion with a random direction, random axis and the given magnitudes."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    r = from_angle_axis(AngleAxis(tuple(axis), math.radians(angle_deg)))
    return RigidTransform(r, direction * translation)


def to_quaternion(r) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0."""
    q = Rotation.from_matrix(np.asarray(r, dtype=float)).as_quat()
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    return nearest_rotation(Rotation.from_quat(q / n).as_matrix())


def to_pose_text(t: RigidTransform) -> str:
    """``tx ty tz qx qy qz qw`` with the quaternion normalized and w >= 0."""
    q = to_quaternion(t.rotation)
    return " ".join(repr(float(v)) for v in (*t.translation, *q))


def pose_fields(t: RigidTransform) -> list[float]:
    return [float(v) for v in (*t.translation, *to_quaternion(t.rotation))]


def from_pose_fields(values) -> RigidTransform:
    v = [float(x) for x in values]
    if len(v) != 7:
        raise ValueError(f"pose needs 7 numbers (tx ty tz qx qy qz qw), got {len(v)}")
    return RigidTransform(from_quaternion(v[3:]), v[:3])


def from_pose_text(text: str) -> RigidTransform:
    return from_pose_fields(text.split())


def is_valid_rigid(t: RigidTransform, tol: float = ORTHO_TOL) -> bool:
    r = t.rotation
    return (
        np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol
    )
