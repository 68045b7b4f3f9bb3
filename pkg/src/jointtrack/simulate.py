"""Deterministic synthetic capture rig: mannequin, markers, depth and poses.

Frames of reference used throughout:

* world   -- the room (scene-map) frame, z up.
* body    -- the mannequin mesh frame: x from hips to head, y left, z anterior.
* map     -- the marker-map frame, rigidly attached to the body.
* camera  -- pinhole camera frame: x right, y down, z forward.

Ground truth stores ``world_from_body`` and ``world_from_camera``; the
simulated scene tracker reports ``camera_from_world``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .cloud import CameraIntrinsics, DepthImage, TriangleMesh
from .raycast import Bvh
from .se3 import AngleAxis, RigidTransform, exp_so3, from_angle_axis, inverse, log_so3

# Random streams; each (seed, stream, frame) triple owns an independent generator.
STREAM_DEPTH = 1
STREAM_PIXELS = 2
STREAM_SCENE = 3
STREAM_DROPOUT = 4


def frame_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0  # mm
    pixel_sigma: float = 0.0  # px
    scene_pose_sigma: tuple[float, float] = (0.0, 0.0)  # (mm, deg)
    detection_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth_sigma < 0 or self.pixel_sigma < 0 or min(self.scene_pose_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.detection_dropout <= 1.0:
            raise ValueError("detection_dropout must lie in [0, 1]")
        object.__setattr__(self, "scene_pose_sigma", tuple(float(v) for v in self.scene_pose_sigma))

    @classmethod
    def l515(cls, seed: int = 0) -> NoiseModel:
        return cls(2.0, 0.5, (1.0, 0.1), 0.05, seed)


DEFAULT_INTRINSICS = CameraIntrinsics(fx=460.0, fy=460.0, cx=319.5, cy=239.5, width=640, height=480)


@dataclass(frozen=True, eq=False)
class MarkerMap:
    """Marker id -> (4, 3) corners in the map frame.

    Corner order is counter-clockwise from top-left as seen from the marker's
    front side: top-left, bottom-left, bottom-right, top-right.
    """

    markers: dict[int, np.ndarray]
    marker_side: float

    def __post_init__(self) -> None:
        fixed = {}
        for mid, c in self.markers.items():
            c = np.array(c, dtype=float).reshape(4, 3)
            c.setflags(write=False)
            fixed[int(mid)] = c
        object.__setattr__(self, "markers", dict(sorted(fixed.items())))

    def corners(self, ids) -> np.ndarray:
        return np.concatenate([self.markers[i] for i in ids]) if len(ids) else np.zeros((0, 3))


@dataclass(frozen=True, eq=False)
class MarkerDetection:
    id: int
    corners: np.ndarray  # (4, 2) pixels, same order as the map


MarkerDetections = list[MarkerDetection]


@dataclass(frozen=True)
class GroundTruth:
    body_pose: RigidTransform  # world_from_body
    camera_pose: RigidTransform  # world_from_camera


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    depth: DepthImage
    detections: MarkerDetections
    scene_pose: RigidTransform  # camera_from_world, as a scene tracker reports it
    scene_valid: bool = True
    ground_truth: GroundTruth | None = None


@dataclass(frozen=True, eq=False)
class BodyModel:
    mesh: TriangleMesh
    marker_map: MarkerMap
    body_from_map: RigidTransform

    def marker_corners_body(self) -> dict[int, np.ndarray]:
        return {i: self.body_from_map.apply(c) for i, c in self.marker_map.markers.items()}


# Mannequin profile (meters, body frame). The torso has a constant elliptical
# cross-section between TORSO_FLAT so markers sit on an exact prism.
TORSO_HALF_WIDTH = 0.17
TORSO_HALF_DEPTH = 0.105
TORSO_FLAT = (-0.33, 0.10)
TORSO_CAP = 0.12
NECK = (0.12, 0.30, 0.055)
HEAD_CENTER, HEAD_AXES = 0.36, (0.12, 0.075, 0.09)
BODY_EXTENT = (TORSO_FLAT[0] - TORSO_CAP, HEAD_CENTER + HEAD_AXES[0])
MARKER_SIDE = 0.04
MARKER_ROWS = (-0.26, -0.12, 0.02)
MARKER_ANGLES_DEG = (45.0, 75.0, 105.0, 135.0)


def _cap(t: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(1.0 - t * t, 0.0, 1.0))


def _profile(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = TORSO_FLAT
    g = np.where(x < lo, _cap((lo - x) / TORSO_CAP), np.where(x > hi, _cap((x - hi) / TORSO_CAP), 1.0))
    g = np.where((x < lo - TORSO_CAP) | (x > hi + TORSO_CAP), 0.0, g)
    neck = np.where((x >= NECK[0]) & (x <= NECK[1]), NECK[2], 0.0)
    h = _cap((x - HEAD_CENTER) / HEAD_AXES[0])
    a = np.maximum.reduce([TORSO_HALF_WIDTH * g, neck, HEAD_AXES[1] * h])
    b = np.maximum.reduce([TORSO_HALF_DEPTH * g, neck, HEAD_AXES[2] * h])
    return a, b


def _ellipse(theta: float) -> np.ndarray:
    return np.array([TORSO_HALF_WIDTH * math.cos(theta), TORSO_HALF_DEPTH * math.sin(theta)])


def _marker_corners(x0: float, theta0: float, side: float) -> tuple[np.ndarray, RigidTransform]:
    """A square marker whose four corners lie exactly on the torso prism."""
    half = brentq(
        lambda dl: np.linalg.norm(_ellipse(theta0 + dl) - _ellipse(theta0 - dl)) - side, 1e-6, math.pi / 2
    )
    p_plus, p_minus = _ellipse(theta0 + half), _ellipse(theta0 - half)
    chord = p_plus - p_minus
    normal = np.array([0.0, chord[1], -chord[0]]) / np.linalg.norm(chord)
    v = np.array([1.0, 0.0, 0.0])
    u = np.cross(v, normal)
    center = np.array([x0, *(0.5 * (p_plus + p_minus))])
    s = 0.5 * side
    corners = np.array([center - s * u + s * v, center - s * u - s * v, center + s * u - s * v, center + s * u + s * v])
    frame = RigidTransform(np.column_stack([u, v, normal]), center)
    return corners, frame


def make_mannequin(resolution: int = 32) -> BodyModel:
    """Torso-like closed mesh (capsule torso, neck, ellipsoid head) with 12 markers.

    The surface has sphere topology: ``5 * resolution`` rings of
    ``4 * resolution`` vertices between two poles.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    n_seg, n_ring = 4 * resolution, 5 * resolution
    x0, x1 = BODY_EXTENT
    xs = np.linspace(x0, x1, 20001)
    a, b = _profile(xs)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xs), np.diff(np.maximum(a, b))))])
    ring_arc = np.linspace(0.0, arc[-1], n_ring + 2)[1:-1]
    ring_x = np.interp(ring_arc, arc, xs)
    ra, rb = _profile(ring_x)
    phi = 2.0 * np.pi * np.arange(n_seg) / n_seg
    ring = np.stack(
        [np.repeat(ring_x, n_seg), (ra[:, None] * np.cos(phi)).ravel(), (rb[:, None] * np.sin(phi)).ravel()], axis=1
    )
    vertices = np.vstack([[x0, 0.0, 0.0], ring, [x1, 0.0, 0.0]])
    j = np.arange(n_seg)
    jn = (j + 1) % n_seg
    tris = [np.stack([np.zeros(n_seg, int), 1 + jn, 1 + j], axis=1)]
    for i in range(n_ring - 1):
        a0 = 1 + i * n_seg
        b0 = a0 + n_seg
        tris.append(np.stack([a0 + j, a0 + jn, b0 + j], axis=1))
        tris.append(np.stack([a0 + jn, b0 + jn, b0 + j], axis=1))
    last = 1 + (n_ring - 1) * n_seg
    tris.append(np.stack([np.full(n_seg, len(vertices) - 1), last + j, last + jn], axis=1))
    triangles = np.concatenate(tris)
    # orient outward (positive signed volume)
    tv = vertices[triangles]
    if np.einsum("ij,ij->i", tv[:, 0], np.cross(tv[:, 1], tv[:, 2])).sum() < 0:
        triangles = triangles[:, [0, 2, 1]]
    mesh = TriangleMesh(vertices, triangles).compute_vertex_normals()

    corners_body, frames = {}, []
    mid = 0
    for x in MARKER_ROWS:
        for ang in MARKER_ANGLES_DEG:
            c, f = _marker_corners(x, math.radians(ang), MARKER_SIDE)
            corners_body[mid] = c
            frames.append(f)
            mid += 1
    body_from_map = frames[0]
    map_from_body = inverse(body_from_map)
    mmap = MarkerMap({i: map_from_body.apply(c) for i, c in corners_body.items()}, MARKER_SIDE)
    return BodyModel(mesh, mmap, body_from_map)


def render_depth_float(bvh: Bvh, mesh_from_camera: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Noise-free optical-axis depth in meters (0 = miss), before quantization."""
    return bvh.depth_image(mesh_from_camera, k)


def quantize_depth(depth_m: np.ndarray, noise: NoiseModel | None = None,
                   rng: np.random.Generator | None = None) -> DepthImage:
    """Meters to a 16-bit millimeter image: noise on valid pixels, round, clamp."""
    depth_mm = np.asarray(depth_m, dtype=float) * 1000.0
    valid = depth_mm > 0
    sigma = noise.depth_sigma if noise is not None else 0.0
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(noise.seed)
        depth_mm = depth_mm.copy()
        depth_mm[valid] += rng.normal(0.0, sigma, int(valid.sum()))
    out = np.clip(np.rint(depth_mm), 0, 65535)
    out[~valid] = 0
    return DepthImage(out.astype(np.uint16))


def render_depth(
    mesh: TriangleMesh | Bvh,
    camera_pose: RigidTransform,
    k: CameraIntrinsics,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
) -> DepthImage:
    """Ray-cast depth image in millimeters.

    ``camera_pose`` is the camera pose in the mesh frame (mesh_from_camera).
    Valid pixels get Gaussian noise, are rounded to whole millimeters, then
    clamped to the 16-bit range; misses stay 0.
    """
    bvh = mesh if isinstance(mesh, Bvh) else Bvh.build(mesh)
    return quantize_depth(render_depth_float(bvh, camera_pose, k), noise, rng)


def project_markers(
    marker_map: MarkerMap,
    body_pose: RigidTransform,
    camera_pose: RigidTransform,
    k: CameraIntrinsics,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    dropout_rng: np.random.Generator | None = None,
    max_view_angle_deg: float = 80.0,
    min_depth: float = 0.1,
) -> MarkerDetections:
    """Pinhole-project marker corners; ``body_pose`` is world_from_map, ``camera_pose`` world_from_camera."""
    camera_from_map = inverse(camera_pose) @ body_pose
    noise = noise or NoiseModel()
    cos_limit = math.cos(math.radians(max_view_angle_deg))
    out: MarkerDetections = []
    for mid, corners in marker_map.markers.items():
        cam = camera_from_map.apply(corners)
        if np.any(cam[:, 2] <= min_depth):
            continue
        normal = np.cross(cam[1] - cam[0], cam[3] - cam[0])
        normal /= np.linalg.norm(normal)
        to_camera = -cam.mean(axis=0)
        if np.dot(normal, to_camera) < cos_limit * np.linalg.norm(to_camera):
            continue
        uv = k.project(cam)
        if np.any(uv < -0.5) or np.any(uv[:, 0] > k.width - 0.5) or np.any(uv[:, 1] > k.height - 0.5):
            continue
        out.append(MarkerDetection(mid, uv))
    if noise.pixel_sigma > 0 and out:
        rng = rng if rng is not None else np.random.default_rng(noise.seed)
        jitter = rng.normal(0.0, noise.pixel_sigma, (len(out), 4, 2))
        out = [MarkerDetection(d.id, np.clip(d.corners + j, -0.5, [k.width - 0.5, k.height - 0.5]))
               for d, j in zip(out, jitter)]
    if noise.detection_dropout > 0 and out:
        dropout_rng = dropout_rng if dropout_rng is not None else np.random.default_rng(noise.seed + 1)
        keep = dropout_rng.random(len(out)) >= noise.detection_dropout
        out = [d for d, kk in zip(out, keep) if kk]
    return out


def simulate_scene_pose(
    gt_camera_pose: RigidTransform, noise: NoiseModel | None = None, rng: np.random.Generator | None = None
) -> tuple[RigidTransform, bool]:
    """Scene-tracker output (camera_from_world) with Gaussian pose noise.

    The perturbation acts in the camera frame: a rotation about a uniformly
    random axis by a half-normal angle, and a Gaussian translation.
    """
    truth = inverse(gt_camera_pose)
    noise = noise or NoiseModel()
    sigma_mm, sigma_deg = noise.scene_pose_sigma
    if sigma_mm == 0 and sigma_deg == 0:
        return truth, True
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, math.radians(sigma_deg)))
    t = rng.normal(0.0, sigma_mm / 1000.0, 3)
    delta = RigidTransform(from_angle_axis(AngleAxis(tuple(axis), angle)), t)
    return delta @ truth, True


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """world_from_camera for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=float))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return RigidTransform(np.column_stack([r, d, f]), eye)


@dataclass(frozen=True)
class OrbitPath:
    """Camera on a horizontal circle around ``center``, looking at ``target``.

    The azimuth moves linearly from ``start_deg`` to ``end_deg`` and the
    radius linearly by ``dolly`` meters over the sequence.
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.55
    height: float = 0.95
    start_deg: float = 0.0
    end_deg: float = 360.0
    dolly: float = 0.0
    target: tuple[float, float, float] | None = None

    def eye(self, s: float) -> np.ndarray:
        ang = math.radians(self.start_deg + (self.end_deg - self.start_deg) * s)
        r = self.radius + self.dolly * s
        c = np.asarray(self.center, dtype=float)
        return c + np.array([r * math.cos(ang), r * math.sin(ang), self.height])

    def pose(self, s: float) -> RigidTransform:
        target = self.center if self.target is None else self.target
        return look_at(self.eye(s), target)


@dataclass(frozen=True)
class BodyWaypoint:
    frame: int
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # m, body frame
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rotation vector, rad


@dataclass(frozen=True)
class SequenceSpec:
    """Everything that determines a simulated sequence.

    The body pose is ``reference @ offset(i)`` where the offset interpolates
    the waypoints linearly (constant velocity between waypoints). Frames
    inside a ``blackout`` range (inclusive, 1-based) lose all detections.
    """

    n_frames: int
    camera: OrbitPath = OrbitPath()
    waypoints: tuple[BodyWaypoint, ...] = ()
    reference: RigidTransform = field(default_factory=RigidTransform.identity)
    noise: NoiseModel = NoiseModel()
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    blackout: tuple[tuple[int, int], ...] = ()
    name: str = "sequence"

    def body_offset(self, index: int) -> RigidTransform:
        if not self.waypoints:
            return RigidTransform.identity()
        wps = sorted(self.waypoints, key=lambda w: w.frame)
        if index <= wps[0].frame:
            w = wps[0]
            return RigidTransform(exp_so3(w.rotation), w.translation)
        for a, b in zip(wps, wps[1:]):
            if index <= b.frame:
                s = (index - a.frame) / (b.frame - a.frame)
                ra, rb = exp_so3(a.rotation), exp_so3(b.rotation)
                rot = ra @ exp_so3(s * log_so3(ra.T @ rb))
                trans = (1 - s) * np.asarray(a.translation) + s * np.asarray(b.translation)
                return RigidTransform(rot, trans)
        w = wps[-1]
        return RigidTransform(exp_so3(w.rotation), w.translation)

    def body_pose(self, index: int) -> RigidTransform:
        return self.reference @ self.body_offset(index)

    def camera_pose(self, index: int) -> RigidTransform:
        s = 0.0 if self.n_frames <= 1 else (index - 1) / (self.n_frames - 1)
        return self.camera.pose(s)

    def blacked_out(self, index: int) -> bool:
        return any(lo <= index <= hi for lo, hi in self.blackout)


def render_frame_depth(spec: SequenceSpec, bvh: Bvh, index: int) -> np.ndarray:
    """Noise-free float depth (meters) of frame ``index``; depends only on geometry."""
    mesh_from_camera = inverse(spec.body_pose(index)) @ spec.camera_pose(index)
    return render_depth_float(bvh, mesh_from_camera, spec.intrinsics)


def simulate_frame(spec: SequenceSpec, body: BodyModel, bvh: Bvh, index: int,
                   depth_m: np.ndarray | None = None) -> Frame:
    """Frame ``index`` (1-based), reproducible from (spec, index) alone.

    ``depth_m`` may carry a precomputed ``render_frame_depth`` result so that
    several noise settings of one trajectory share a single ray cast.
    """
    seed = spec.noise.seed
    body_pose = spec.body_pose(index)
    cam_pose = spec.camera_pose(index)
    if depth_m is None:
        depth_m = render_frame_depth(spec, bvh, index)
    depth = quantize_depth(depth_m, spec.noise, frame_rng(seed, STREAM_DEPTH, index))
    if spec.blacked_out(index):
        detections: MarkerDetections = []
    else:
        detections = project_markers(
            body.marker_map,
            body_pose @ body.body_from_map,
            cam_pose,
            spec.intrinsics,
            spec.noise,
            frame_rng(seed, STREAM_PIXELS, index),
            frame_rng(seed, STREAM_DROPOUT, index),
        )
    scene, valid = simulate_scene_pose(cam_pose, spec.noise, frame_rng(seed, STREAM_SCENE, index))
    return Frame(index, depth, detections, scene, valid, GroundTruth(body_pose, cam_pose))


def generate_sequence(spec: SequenceSpec, body: BodyModel | None = None) -> list[Frame]:
    body = body or make_mannequin()
    bvh = Bvh.build(body.mesh)
    return [simulate_frame(spec, body, bvh, i) for i in range(1, spec.n_frames + 1)]


def iter_sequence(spec: SequenceSpec, body: BodyModel):
    bvh = Bvh.build(body.mesh)
    for i in range(1, spec.n_frames + 1):
        yield simulate_frame(spec, body, bvh, i)


# Scenario library -----------------------------------------------------------

REFERENCE_POSE = RigidTransform(from_angle_axis(AngleAxis((0.0, 0.0, 1.0), math.radians(3.0))), (0.04, -0.02, 0.0))


def reconstruction_spec(n_frames: int = 150, noise: NoiseModel | None = None, seed: int = 0) -> SequenceSpec:
    """Static body at the reference pose, camera on a full orbit."""
    noise = noise if noise is not None else NoiseModel(seed=seed)
    return SequenceSpec(
        n_frames=n_frames,
        camera=OrbitPath(radius=0.55, height=0.95, start_deg=0.0, end_deg=360.0 * (1 - 1 / n_frames)),
        reference=REFERENCE_POSE,
        noise=replace(noise, seed=seed) if noise.seed != seed else noise,
        name="reconstruction",
    )


def tracking_spec(variant: int, n_frames: int = 300, noise: NoiseModel | None = None, seed: int = 0,
                  blackout: tuple[tuple[int, int], ...] = ()) -> SequenceSpec:
    """One of the evaluation-style sequences: the body is moved and rotated
    around the reference pose while the camera moves locally."""
    noise = noise if noise is not None else NoiseModel(seed=seed)
    rng = np.random.default_rng([7919, variant])
    n_way = 6
    frames = np.linspace(1, n_frames, n_way).round().astype(int)
    shrink = np.linspace(1.0, 0.15, n_way)
    waypoints = []
    for f, s in zip(frames, shrink):
        t = rng.uniform(-0.04, 0.04, 3) * s * np.array([1.0, 1.0, 0.5])
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = math.radians(rng.uniform(2.0, 6.0) * s)
        waypoints.append(BodyWaypoint(int(f), tuple(t), tuple(axis * ang)))
    start = 60.0 * variant + rng.uniform(-10, 10)
    camera = OrbitPath(
        radius=0.5 + 0.05 * (variant % 3),
        height=0.9 + 0.05 * (variant % 2),
        start_deg=start,
        end_deg=start + rng.uniform(25.0, 45.0) * (1 if variant % 2 else -1),
        dolly=rng.uniform(-0.08, 0.08),
    )
    return SequenceSpec(
        n_frames=n_frames,
        camera=camera,
        waypoints=tuple(waypoints),
        reference=REFERENCE_POSE,
        noise=replace(noise, seed=seed) if noise.seed != seed else noise,
        blackout=blackout,
        name=f"track-{variant}",
    )


def dropout_spec(n_frames: int = 40, seed: int = 0) -> SequenceSpec:
    """Noise-free tracking sequence with scripted marker blackouts:
    frames 1-3 before acquisition and frames 21-25 mid-sequence."""
    base = tracking_spec(1, n_frames=n_frames, seed=seed)
    return replace(base, blackout=((1, 3), (21, 25)), name="dropout")
