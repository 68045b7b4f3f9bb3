"""Accuracy against ground truth with split-half calibration, plus throughput.

Tracker output and ground truth live in different frames on both sides: the
tracker's world and body frames need not match the reference system's. The
calibration model ``gt_i ~= X @ est_i @ Y`` absorbs both unknown offsets and
is fitted on the first half of a sequence; errors are reported on the second.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyInput, LengthMismatch, TooFewFrames, TooFewPoses
from .posealign import PosePair, pair_residual, solve_pose_pairs
from .se3 import RigidTransform, inverse, log_so3

logger = logging.getLogger(__name__)

MAX_ROUNDS = 50
MIN_IMPROVEMENT = 1e-10
POLISH_ROUNDS = 500
POLISH_STEP = 1e-13
MIN_CALIBRATION_POSES = 4


@dataclass(frozen=True)
class Calibration:
    world: RigidTransform  # X: tracker world -> reference world
    body: RigidTransform  # Y: reference body -> tracker body
    residual_mm: float
    residual_deg: float
    frobenius: float
    rounds: int = 0


@dataclass
class SequenceEval:
    rotational_errors: list[float]
    translational_errors: list[float]
    frame_rates: list[float] = field(default_factory=list)
    evaluated_frames: int = 0
    missing_frames: int = 0
    name: str = ""

    @property
    def mre(self) -> float:
        return _mean(self.rotational_errors)

    @property
    def mte(self) -> float:
        return _mean(self.translational_errors)

    @property
    def median_re(self) -> float:
        return _lower_median(self.rotational_errors)

    @property
    def median_te(self) -> float:
        return _lower_median(self.translational_errors)

    @property
    def mean_fps(self) -> float:
        return _mean(self.frame_rates)

    @property
    def coverage(self) -> float:
        total = self.evaluated_frames + self.missing_frames
        return self.evaluated_frames / total if total else math.nan

    def summary(self) -> dict:
        return {
            "name": self.name,
            "frames": self.evaluated_frames + self.missing_frames,
            "mre_deg": self.mre,
            "mte_mm": self.mte,
            "median_re_deg": self.median_re,
            "median_te_mm": self.median_te,
            "mean_fps": self.mean_fps,
            "coverage": self.coverage,
        }


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def _lower_median(values) -> float:
    if not len(values):
        return math.nan
    return float(np.sort(np.asarray(values, dtype=float))[(len(values) - 1) // 2])


def error_transform(cal: Calibration, est: RigidTransform, gt: RigidTransform) -> RigidTransform:
    return inverse(cal.world @ est @ cal.body) @ gt


def pose_error(cal: Calibration, est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(degrees, millimeters) of the calibrated error transform."""
    e = error_transform(cal, est, gt)
    return math.degrees(e.angle), float(np.linalg.norm(e.translation)) * 1000.0


def _hand_eye_body(est: list[RigidTransform], gt: list[RigidTransform]) -> RigidTransform:
    """Initial Y from relative motions: (est_i^-1 est_j) Y = Y (gt_i^-1 gt_j)."""
    a_rel, b_rel = [], []
    n = len(est)
    for i in range(n):
        for j in (i + 1, n - 1 - i):
            if 0 <= j < n and j != i:
                a_rel.append(inverse(est[i]) @ est[j])
                b_rel.append(inverse(gt[i]) @ gt[j])
    alpha = np.array([log_so3(a.rotation) for a in a_rel])
    beta = np.array([log_so3(b.rotation) for b in b_rel])
    if np.linalg.norm(alpha, axis=1).max(initial=0.0) < 1e-9:
        rot = np.eye(3)
    else:
        rot = Rotation.align_vectors(alpha, beta)[0].as_matrix()
    lhs = np.vstack([a.rotation - np.eye(3) for a in a_rel])
    rhs = np.concatenate([rot @ b.translation - a.translation for a, b in zip(a_rel, b_rel)])
    trans = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return RigidTransform(Rotation.from_matrix(rot).as_matrix(), trans)


def _solve_world(est, gt, body) -> RigidTransform:
    return solve_pose_pairs([PosePair(inverse(g), inverse(e @ body), i) for i, (e, g) in enumerate(zip(est, gt))])


def _solve_body(est, gt, world) -> RigidTransform:
    wi = inverse(world)
    return solve_pose_pairs([PosePair(e, wi @ g, i) for i, (e, g) in enumerate(zip(est, gt))])


def _polar(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _rigid_world(est, gt, body) -> RigidTransform:
    """X minimizing sum ||X (e Y) - g||_F over rigid X: Procrustes on rotations and centered translations."""
    b = [e @ body for e in est]
    tb = np.array([x.translation for x in b])
    tg = np.array([g.translation for g in gt])
    cb, cg = tb.mean(axis=0), tg.mean(axis=0)
    m = sum(g.rotation @ x.rotation.T for g, x in zip(gt, b)) + (tg - cg).T @ (tb - cb)
    rot = _polar(m)
    return RigidTransform(rot, cg - rot @ cb)


def _rigid_body(est, gt, world) -> RigidTransform:
    """Y minimizing sum ||(X e) Y - g||_F over rigid Y; rotation and translation decouple."""
    b = [world @ e for e in est]
    rot = _polar(sum(x.rotation.T @ g.rotation for x, g in zip(b, gt)))
    trans = np.mean([x.rotation.T @ (g.translation - x.translation) for x, g in zip(b, gt)], axis=0)
    return RigidTransform(rot, trans)


def _polish(est, gt, world, body) -> tuple[RigidTransform, RigidTransform]:
    """Alternate exact rigid steps on the same Frobenius objective until the transforms settle.

    The linear steps weight residuals by the frame the poses are written in; the
    rigid optimum does not, so the reported errors do not depend on that frame.
    """
    for _ in range(POLISH_ROUNDS):
        new_world = _rigid_world(est, gt, body)
        new_body = _rigid_body(est, gt, new_world)
        step = max(np.abs(new_world.matrix - world.matrix).max(), np.abs(new_body.matrix - body.matrix).max())
        world, body = new_world, new_body
        if step < POLISH_STEP:
            break
    return world, body


def _frobenius(est, gt, world, body) -> float:
    return pair_residual([PosePair(world @ e, g) for e, g in zip(est, gt)], body)


def calibrate(est: list[RigidTransform], gt: list[RigidTransform]) -> Calibration:
    """Fit ``gt_i ~= X est_i Y`` over all given pairs.

    Alternating linear solves (the same solver as the marker-map alignment)
    give the starting point; exact rigid alternation then finishes the fit.
    """
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimates vs {len(gt)} ground-truth poses")
    if len(est) < MIN_CALIBRATION_POSES:
        raise TooFewPoses(f"calibration needs at least {MIN_CALIBRATION_POSES} poses, got {len(est)}")
    body = _hand_eye_body(est, gt)
    world = _solve_world(est, gt, body)
    best = (_frobenius(est, gt, world, body), world, body)
    rounds = 0
    for rounds in range(1, MAX_ROUNDS + 1):
        body = _solve_body(est, gt, world)
        world = _solve_world(est, gt, body)
        res = _frobenius(est, gt, world, body)
        improved = best[0] - res
        if res < best[0]:
            best = (res, world, body)
        if improved < MIN_IMPROVEMENT:
            break
    _, world, body = best
    world, body = _polish(est, gt, world, body)
    res = _frobenius(est, gt, world, body)
    cal = Calibration(world, body, 0.0, 0.0, res, rounds)
    errs = np.array([pose_error(cal, e, g) for e, g in zip(est, gt)])
    return Calibration(world, body, float(errs[:, 1].mean()), float(errs[:, 0].mean()), res, rounds)


def split_half_calibrate(est: list[RigidTransform | None], gt: list[RigidTransform]) -> Calibration:
    """Calibrate on the first half (by frame position) of a sequence; frames without a pose are skipped."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimates vs {len(gt)} ground-truth poses")
    half = len(est) // 2
    pairs = [(e, g) for e, g in zip(est[:half], gt[:half]) if e is not None]
    if len(pairs) < MIN_CALIBRATION_POSES:
        raise TooFewPoses(f"first half has {len(pairs)} poses; need {MIN_CALIBRATION_POSES}")
    return calibrate([p[0] for p in pairs], [p[1] for p in pairs])


def _as_pose(item) -> RigidTransform | None:
    if item is None or isinstance(item, RigidTransform):
        return item
    return item.world_pose  # TrackResult


def evaluate_sequence(tracked, gt: list[RigidTransform], cal: Calibration,
                      frame_rates: list[float] | None = None, name: str = "") -> SequenceEval:
    """Errors over the second half; ``tracked`` holds world-frame poses, TrackResults or None."""
    if len(tracked) != len(gt):
        raise LengthMismatch(f"{len(tracked)} tracked frames vs {len(gt)} ground-truth poses")
    half = len(tracked) // 2
    re, te = [], []
    missing = 0
    for item, g in zip(tracked[half:], gt[half:]):
        est = _as_pose(item)
        if est is None:
            missing += 1
            continue
        r, t = pose_error(cal, est, g)
        re.append(r)
        te.append(t)
    return SequenceEval(re, te, list(frame_rates or []), len(re), missing, name)


def aggregate(evals: list[SequenceEval], name: str = "pooled") -> SequenceEval:
    """Pool per-frame lists across sequences and recompute every statistic."""
    if not evals:
        raise EmptyInput("nothing to aggregate")
    return SequenceEval(
        [x for e in evals for x in e.rotational_errors],
        [x for e in evals for x in e.translational_errors],
        [x for e in evals for x in e.frame_rates],
        sum(e.evaluated_frames for e in evals),
        sum(e.missing_frames for e in evals),
        name,
    )


def frame_duration_us(timing) -> float:
    if isinstance(timing, dict):
        return float(timing["total"]) if "total" in timing else float(sum(timing.values()))
    return float(timing)


def frame_rates(timings) -> list[float]:
    return [1e6 / d for d in (frame_duration_us(t) for t in timings) if d > 0]


def measure_fps(timings) -> float:
    """Mean of per-frame rates 1/dt; each entry is a duration in microseconds or a stage dict."""
    if len(timings) < 2:
        raise TooFewFrames("fps needs at least 2 frames")
    return float(np.mean(frame_rates(timings)))


def write_eval_csv(path, ev: SequenceEval) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "rot_err_deg", "trans_err_mm"])
        for i, (r, t) in enumerate(zip(ev.rotational_errors, ev.translational_errors)):
            w.writerow([i, repr(r), repr(t)])


def summary_document(evals: list[SequenceEval]) -> dict:
    pooled = aggregate(evals).summary()
    pooled.pop("name")
    return {"sequences": [e.summary() for e in evals], "pooled": pooled}


def write_summary(path, evals: list[SequenceEval]) -> dict:
    doc = summary_document(evals)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def format_table(evals: list[SequenceEval]) -> str:
    """Per-sequence table with a pooled row, in the usual MRE/MTE layout."""
    rows = [("Sequence", "Frames", "MRE (deg)", "MTE (mm)", "MedRE", "MedTE", "fps", "Coverage")]
    for e in [*evals, aggregate(evals, "All")]:
        s = e.summary()
        rows.append((s["name"], str(s["frames"]), f"{s['mre_deg']:.3f}", f"{s['mte_mm']:.3f}",
                     f"{s['median_re_deg']:.3f}", f"{s['median_te_mm']:.3f}", f"{s['mean_fps']:.2f}",
                     f"{100 * s['coverage']:.1f}%"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
