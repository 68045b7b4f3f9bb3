import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from jointtrack.errors import EmptyInput, LengthMismatch, TooFewFrames, TooFewPoses
from jointtrack.evaluate import (Calibration, SequenceEval, aggregate, calibrate, evaluate_sequence, format_table,
                                 measure_fps, pose_error, split_half_calibrate, summary_document, write_eval_csv,
                                 write_summary)
from jointtrack.pipeline import TrackResult, TrackStatus
from jointtrack.se3 import RigidTransform, is_valid_rigid, perturbation, random_transform

IDENTITY_CAL = Calibration(RigidTransform.identity(), RigidTransform.identity(), 0.0, 0.0, 0.0)


def _trajectory(rng, n):
    """Rotation-rich body poses around a point a meter from the origin."""
    return [RigidTransform(Rotation.random(random_state=rng.integers(2**31)).as_matrix(),
                           rng.normal(0, 0.2, 3) + [0, 0, 1.0]) for _ in range(n)]


def test_identity_calibration():
    est = _trajectory(np.random.default_rng(0), 20)
    cal = split_half_calibrate(est, est)
    assert np.abs(cal.world.matrix - np.eye(4)).max() < 1e-9
    assert np.abs(cal.body.matrix - np.eye(4)).max() < 1e-9


def test_recovers_both_transforms():
    rng = np.random.default_rng(1)
    x0, y0 = random_transform(rng), random_transform(rng, 0.1)
    est = _trajectory(rng, 30)
    gt = [x0 @ e @ y0 for e in est]
    cal = calibrate(est, gt)
    assert np.abs(cal.world.matrix - x0.matrix).max() < 1e-6
    assert np.abs(cal.body.matrix - y0.matrix).max() < 1e-6
    assert is_valid_rigid(cal.world) and is_valid_rigid(cal.body)


def _kabsch(src, dst):
    rot, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
    r = rot.as_matrix()
    return RigidTransform(r, dst.mean(0) - r @ src.mean(0))


def test_world_side_matches_procrustes_on_translations():
    rng = np.random.default_rng(2)
    x0, y0 = random_transform(rng), random_transform(rng, 0.1)
    est = _trajectory(rng, 30)
    gt = [x0 @ e @ y0 for e in est]
    cal = calibrate(est, gt)
    oracle = _kabsch(np.array([(e @ cal.body).translation for e in est]), np.array([g.translation for g in gt]))
    assert np.abs(oracle.matrix - cal.world.matrix).max() < 1e-6


def test_noisy_holdout_residual():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x0, y0 = random_transform(rng), random_transform(rng, 0.1)
        est = _trajectory(rng, 60)
        gt = [x0 @ e @ y0 @ perturbation(abs(rng.normal(0, 0.001)), abs(rng.normal(0, 0.1)), rng) for e in est]
        cal = split_half_calibrate(est, gt)
        held = evaluate_sequence(est, gt, cal)
        assert held.mte <= 2 * cal.residual_mm
        assert held.mre <= 2 * cal.residual_deg


def test_noise_free_holdout_not_overfit():
    rng = np.random.default_rng(5)
    x0, y0 = random_transform(rng), random_transform(rng, 0.1)
    est = _trajectory(rng, 40)
    gt = [x0 @ e @ y0 for e in est]
    cal = split_half_calibrate(est, gt)
    held = evaluate_sequence(est, gt, cal)
    # both are at round-off level; the floor keeps the ratio meaningful
    assert held.mte <= max(5 * cal.residual_mm, 1e-9)
    assert held.mre <= max(5 * cal.residual_deg, 1e-6)


def test_calibration_errors():
    est = _trajectory(np.random.default_rng(0), 6)
    with pytest.raises(TooFewPoses):
        split_half_calibrate(est, est)
    with pytest.raises(LengthMismatch):
        split_half_calibrate(est, est[:-1])
    with pytest.raises(TooFewPoses):
        split_half_calibrate([None] * 10 + est, [RigidTransform.identity()] * 10 + est)


def test_perfect_tracking():
    est = _trajectory(np.random.default_rng(3), 20)
    ev = evaluate_sequence(est, est, split_half_calibrate(est, est))
    assert ev.mte < 1e-9 and ev.mre < 1e-6
    assert ev.evaluated_frames == 10 and ev.coverage == 1.0


def test_constant_offset():
    gt = _trajectory(np.random.default_rng(4), 20)
    est = [RigidTransform(g.rotation, g.translation + [0.01, 0.0, 0.0]) for g in gt]
    ev = evaluate_sequence(est, gt, IDENTITY_CAL)
    assert ev.mte == pytest.approx(10.0, abs=1e-9)
    assert ev.mre == pytest.approx(0.0, abs=1e-9)


def test_missing_frames_counted():
    gt = _trajectory(np.random.default_rng(5), 10)
    tracked = list(gt)
    tracked[6] = None
    tracked[8] = TrackResult(9, TrackStatus.AWAITING)
    ev = evaluate_sequence(tracked, gt, IDENTITY_CAL)
    assert ev.evaluated_frames == 3 and ev.missing_frames == 2
    assert ev.coverage == pytest.approx(0.6)
    with pytest.raises(LengthMismatch):
        evaluate_sequence(tracked, gt[:-1], IDENTITY_CAL)


def test_track_results_accepted():
    gt = _trajectory(np.random.default_rng(6), 4)
    scene = random_transform(np.random.default_rng(7))
    tracked = [TrackResult(i, TrackStatus.TRACKING, scene @ g, scene) for i, g in enumerate(gt)]
    ev = evaluate_sequence(tracked, gt, IDENTITY_CAL)
    assert ev.mte < 1e-9


def test_invariant_to_ground_truth_frame():
    rng = np.random.default_rng(8)
    gt = _trajectory(rng, 40)
    est = [g @ perturbation(0.002, 0.3, rng) for g in gt]
    base = evaluate_sequence(est, gt, split_half_calibrate(est, gt))
    a = random_transform(rng)
    moved = [a @ g for g in gt]
    again = evaluate_sequence(est, moved, split_half_calibrate(est, moved))
    assert again.mte == pytest.approx(base.mte, abs=1e-6)
    assert again.mre == pytest.approx(base.mre, abs=1e-6)


def test_medians_use_lower_element():
    ev = SequenceEval([1.0, 4.0, 2.0, 3.0], [5.0, 1.0])
    assert ev.median_re == 2.0 and ev.median_te == 1.0
    assert ev.mre == 2.5 and ev.mte == 3.0


def test_aggregate():
    a = SequenceEval([0.1] * 5, [2.0] * 5, [10.0], 5, 0, "a")
    b = SequenceEval([0.3] * 5, [4.0] * 5, [20.0], 5, 1, "b")
    pooled = aggregate([a, b])
    assert pooled.mte == pytest.approx(3.0)
    assert pooled.mean_fps == pytest.approx(15.0)
    assert pooled.coverage == pytest.approx(10 / 11)
    single = aggregate([a]).summary()
    assert {k: v for k, v in single.items() if k != "name"} == {k: v for k, v in a.summary().items() if k != "name"}
    with pytest.raises(EmptyInput):
        aggregate([])


def test_aggregate_median_and_copies():
    rng = np.random.default_rng(9)
    evals = [SequenceEval(list(rng.random(n)), list(rng.random(n)), [], n) for n in (7, 10, 4)]
    pooled = aggregate(evals)
    everything = sorted(x for e in evals for x in e.translational_errors)
    assert pooled.median_te == everything[(len(everything) - 1) // 2]
    copies = aggregate([evals[0]] * 4)
    assert copies.mte == pytest.approx(evals[0].mte) and copies.median_re == evals[0].median_re


def test_measure_fps():
    assert measure_fps([100_000.0] * 5) == pytest.approx(10.0)
    assert measure_fps([50_000.0, 150_000.0] * 3) == pytest.approx((20 + 20 / 3) / 2)
    assert measure_fps([{"marker": 1.0, "total": 100_000.0}, {"total": 100_000.0}]) == pytest.approx(10.0)
    with pytest.raises(TooFewFrames):
        measure_fps([100_000.0])


def test_pose_error_units():
    cal = IDENTITY_CAL
    gt = RigidTransform.identity()
    est = RigidTransform(Rotation.from_rotvec([0, 0, math.radians(2.0)]).as_matrix(), [0.003, 0.004, 0.0])
    deg, mm = pose_error(cal, est, gt)
    assert deg == pytest.approx(2.0) and mm == pytest.approx(5.0)


def test_reports(tmp_path):
    a = SequenceEval([0.1, 0.2], [1.0, 2.0], [10.0, 12.0], 2, 0, "seq-a")
    b = SequenceEval([0.3], [3.0], [9.0], 1, 1, "seq-b")
    doc = write_summary(tmp_path / "summary.json", [a, b])
    assert json.loads((tmp_path / "summary.json").read_text()) == doc
    assert set(doc["pooled"]) == {"frames", "mre_deg", "mte_mm", "median_re_deg", "median_te_mm", "mean_fps",
                                  "coverage"}
    assert [s["name"] for s in doc["sequences"]] == ["seq-a", "seq-b"]
    assert summary_document([a, b]) == doc
    write_eval_csv(tmp_path / "a.csv", a)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "index,rot_err_deg,trans_err_mm" and len(lines) == 3
    table = format_table([a, b]).splitlines()
    assert table[0].startswith("Sequence") and table[-1].startswith("All") and len(table) == 4
