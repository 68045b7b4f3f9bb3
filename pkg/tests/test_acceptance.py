"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in an
"acceptance criteria" section at the end of the pytest run.
"""

import json
import re
import time

import numpy as np
import pytest

from jointtrack.cli import main as cli_main
from jointtrack.cloud import KdTree, PointCloud, dynamic_voxel_size, voxel_downsample
from jointtrack.evaluate import aggregate, evaluate_sequence, format_table, frame_rates, split_half_calibrate
from jointtrack.pipeline import (ReconstructionParams, TrackingParams, align_reference_model, init_tracker,
                                 reconstruct_body, track_frame, used_frame_indices)
from jointtrack.posealign import PosePair, solve_pose_pairs
from jointtrack.registration import (IcpParams, find_correspondences, generalized_icp, gicp_information,
                                     gicp_objective, point_to_plane_objective, regularized_covariances)
from jointtrack.se3 import (RigidTransform, inverse, perturbation, random_transform, rotation_distance_deg,
                            translation_distance)
from jointtrack.simulate import (NoiseModel, dropout_spec, iter_sequence, reconstruction_spec, render_frame_depth,
                                 simulate_frame, tracking_spec)
from jointtrack.visibility import extract_visible_points, quickhull3

from conftest import (ball_points, brute_voxels, certified_hull_vertices, gradient_close, numeric_gradient,
                      record_criterion, sample_surface, sphere_points)

pytestmark = pytest.mark.slow

REFERENCE_MTE_MM, REFERENCE_MRE_DEG = 4.17, 0.82
REFERENCE_MEDIAN_TE_MM, REFERENCE_MEDIAN_RE_DEG = 3.83, 0.77


@pytest.fixture(scope="module", autouse=True)
def rigid_audit():
    """Record orthonormality and determinant error of every RigidTransform built in this module."""
    original = RigidTransform.__post_init__
    audit = {"count": 0, "ortho": 0.0, "det": 0.0}

    def audited(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape == (3, 3) and np.all(np.isfinite(r)):
            audit["count"] += 1
            audit["ortho"] = max(audit["ortho"], float(np.abs(r.T @ r - np.eye(3)).max()))
            audit["det"] = max(audit["det"], abs(float(np.linalg.det(r)) - 1.0))
        original(self)

    RigidTransform.__post_init__ = audited
    yield audit
    RigidTransform.__post_init__ = original


def test_criterion_1_exact_pose_pair_recovery():
    rng = np.random.default_rng(1)
    truth = random_transform(rng)
    pairs = []
    for i in range(50):
        p_r = random_transform(rng)
        pairs.append(PosePair(p_r, p_r @ truth, i))
    start = time.perf_counter()
    est = solve_pose_pairs(pairs)
    elapsed = time.perf_counter() - start
    t_err = translation_distance(est, truth)
    r_err = np.radians(rotation_distance_deg(est, truth))
    ok = t_err <= 1e-9 and r_err <= 1e-9 and elapsed < 1.0
    record_criterion(1, ok, f"translation {t_err:.2e} m, rotation {r_err:.2e} rad, {elapsed * 1e3:.1f} ms")
    assert ok


def test_criterion_2_registration_recovery(mannequin):
    pts, _ = sample_surface(mannequin.mesh, 5000, np.random.default_rng(3))
    times = []

    def run(src, dst):
        start = time.perf_counter()
        res = generalized_icp(PointCloud(src), PointCloud(dst))
        times.append(time.perf_counter() - start)
        return res.transform

    truth = perturbation(0.05, 10.0, np.random.default_rng(2))
    est = run(pts, truth.apply(pts))
    clean = (translation_distance(est, truth), rotation_distance_deg(est, truth))
    t_err, r_err = [], []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        truth = perturbation(0.05, 10.0, rng)
        est = run(pts + rng.normal(0, 0.002, pts.shape), truth.apply(pts) + rng.normal(0, 0.002, pts.shape))
        t_err.append(translation_distance(est, truth))
        r_err.append(rotation_distance_deg(est, truth))
    t95, r95 = np.percentile(t_err, 95), np.percentile(r_err, 95)
    ok = clean[0] <= 1e-3 and clean[1] <= 0.1 and t95 <= 5e-3 and r95 <= 1.0 and max(times) < 2.0
    record_criterion(2, ok, f"noise-free {clean[0] * 1e3:.3f} mm / {clean[1]:.4f} deg; sigma 2 mm p95 "
                            f"{t95 * 1e3:.3f} mm / {r95:.4f} deg; slowest run {max(times):.2f} s")
    assert ok


def _ray_cast_visible(points, camera):
    """Exact ray cast against the unit sphere: visible iff the first hit is the point itself."""
    d = points - camera
    d /= np.linalg.norm(d, axis=1)[:, None]
    b = d @ camera
    disc = b * b - (camera @ camera - 1.0)
    first = -b - np.sqrt(np.maximum(disc, 0.0))
    hit = camera + first[:, None] * d
    return np.linalg.norm(hit - points, axis=1) < 1e-6


def test_criterion_3_visibility_and_hull():
    pts, _ = sphere_points(2000)
    agreements = []
    for cam in [(0, 0, 3), (3, 0, 0), (0, -3, 0), (2, 2, 1), (-1.5, -1.5, -2)]:
        c = np.asarray(cam, float)
        c *= 3.0 / np.linalg.norm(c)
        visible = np.zeros(len(pts), bool)
        visible[extract_visible_points(pts, c)] = True
        agreements.append(float(np.mean(visible == _ray_cast_visible(pts, c))))
    rng = np.random.default_rng(7)
    exact = 0
    for _ in range(20):
        ball = ball_points(rng, 2000)
        hull = quickhull3(ball)
        exact += np.array_equal(hull.vertices, np.flatnonzero(certified_hull_vertices(ball, hull)))
    ok = min(agreements) >= 0.95 and exact == 20
    record_criterion(3, ok, f"ray-cast agreement min {min(agreements):.4f} over 5 cameras; "
                            f"hull membership exact on {exact}/20 sets")
    assert ok


def test_criterion_4_downsampling():
    exact = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(10_000, 3)) * rng.uniform(0.1, 1.0, 3)
        size = rng.uniform(0.05, 0.3)
        out = voxel_downsample(PointCloud(pts), size).points
        ref = np.array(list(brute_voxels(pts, size).values()))
        a, b = out[np.lexsort(out.T)], ref[np.lexsort(ref.T)]
        exact += len(a) == len(b) and np.abs(a - b).max() < 1e-12
    cube = dynamic_voxel_size(PointCloud(np.array([[0.0, 0, 0], [2.0, 2, 2]])), 5e4, 0.01)
    small = dynamic_voxel_size(PointCloud(np.array([[0.0, 0, 0], [0.1, 0.1, 0.1]])), 5e4, 0.01)
    ok = exact == 10 and round(cube, 5) == 0.05429 and cube == max((8 / 5e4) ** (1 / 3), 0.01) and small == 0.01
    record_criterion(4, ok, f"centroid multisets identical on {exact}/10 clouds; 2 m cube voxel {cube:.5f} m, "
                            f"small cloud clamps to {small} m")
    assert ok


def _reconstruct_and_align(mannequin, bvh, noises, seed=0):
    """Shared-geometry reconstruction and reference alignment for several noise models."""
    specs = [reconstruction_spec(noise=n, seed=seed) for n in noises]
    used = used_frame_indices(range(1, specs[0].n_frames + 1), ReconstructionParams().frame_skip)
    frames = [[] for _ in noises]
    for i in used:
        depth = render_frame_depth(specs[0], bvh, i)
        for f, spec in zip(frames, specs):
            f.append(simulate_frame(spec, mannequin, bvh, i, depth_m=depth))
    t_manual = perturbation(0.02, 3.0, np.random.default_rng(17)) @ inverse(specs[0].body_pose(1))
    out = []
    for f, spec in zip(frames, specs):
        recon = reconstruct_body(f, spec.intrinsics, mannequin.marker_map)
        aligned = align_reference_model(recon.cloud, mannequin.mesh, t_manual)
        out.append((recon, aligned))
    return out


@pytest.fixture(scope="module")
def end_to_end(mannequin, mannequin_bvh):
    """Six 300-frame sequences tracked under L515-like noise and noise-free, sharing one ray cast per frame."""
    conditions = ("l515", "noise-free")
    elapsed = {c: 0.0 for c in conditions}
    start = time.perf_counter()
    setup = _reconstruct_and_align(mannequin, mannequin_bvh, [NoiseModel.l515(), NoiseModel()])
    shared = time.perf_counter() - start
    for c in conditions:
        elapsed[c] += shared / 2
    evals = {c: [] for c in conditions}
    align_info = {c: (r.t_hat, a) for c, (r, a) in zip(conditions, setup)}
    for variant in range(1, 7):
        specs = {"l515": tracking_spec(variant, 300, NoiseModel.l515(variant), seed=variant),
                 "noise-free": tracking_spec(variant, 300, NoiseModel(), seed=variant)}
        states = {c: init_tracker(setup[k][0], setup[k][1].transform, mannequin.mesh, specs[c].reference,
                                  TrackingParams(), marker_map=mannequin.marker_map,
                                  intrinsics=specs[c].intrinsics)
                  for k, c in enumerate(conditions)}
        results = {c: [] for c in conditions}
        gt = []
        for i in range(1, 301):
            t0 = time.perf_counter()
            depth = render_frame_depth(specs["l515"], mannequin_bvh, i)
            render = time.perf_counter() - t0
            for c in conditions:
                t1 = time.perf_counter()
                frame = simulate_frame(specs[c], mannequin, mannequin_bvh, i, depth_m=depth)
                results[c].append(track_frame(states[c], frame))
                elapsed[c] += render + time.perf_counter() - t1
            gt.append(frame.ground_truth.body_pose)
        for c in conditions:
            t2 = time.perf_counter()
            world = [r.world_pose for r in results[c]]
            cal = split_half_calibrate(world, gt)
            rates = frame_rates([r.timings_us for r in results[c] if r.world_pose is not None])
            evals[c].append(evaluate_sequence(results[c], gt, cal, rates, f"track-{variant}"))
            elapsed[c] += time.perf_counter() - t2
    return {"evals": evals, "elapsed": elapsed, "align": align_info}


def test_criterion_5_end_to_end_with_sensor_noise(end_to_end, capsys):
    evals = end_to_end["evals"]["l515"]
    pooled = aggregate(evals, "All")
    seconds = end_to_end["elapsed"]["l515"]
    with capsys.disabled():
        print("\n" + format_table(evals))
        print(f"reference values: MTE {REFERENCE_MTE_MM} mm, MRE {REFERENCE_MRE_DEG} deg, "
              f"median TE {REFERENCE_MEDIAN_TE_MM} mm, median RE {REFERENCE_MEDIAN_RE_DEG} deg")
    ok = (pooled.mte <= 8.0 and pooled.mre <= 1.5 and pooled.coverage >= 0.95
          and pooled.median_te <= 8.0 and pooled.median_re <= 1.5 and seconds < 600.0)
    record_criterion(5, ok, f"pooled MTE {pooled.mte:.3f} mm, MRE {pooled.mre:.3f} deg, median TE "
                            f"{pooled.median_te:.3f} mm, median RE {pooled.median_re:.3f} deg, coverage "
                            f"{100 * pooled.coverage:.1f}%, {seconds:.0f} s (reference {REFERENCE_MTE_MM} mm / "
                            f"{REFERENCE_MRE_DEG} deg, medians {REFERENCE_MEDIAN_TE_MM} / {REFERENCE_MEDIAN_RE_DEG})")
    assert ok


def test_criterion_6_end_to_end_noise_free(end_to_end):
    pooled = aggregate(end_to_end["evals"]["noise-free"], "All")
    ok = pooled.mte <= 1.0 and pooled.mre <= 0.1 and pooled.coverage == 1.0
    record_criterion(6, ok, f"pooled MTE {pooled.mte:.4f} mm, MRE {pooled.mre:.4f} deg, "
                            f"coverage {100 * pooled.coverage:.1f}%")
    assert ok


def test_criterion_7_throughput(tmp_path, capsys):
    out = tmp_path / "bench.json"
    code = cli_main(["bench", "--frames", "100", "--out", str(out)])
    text = capsys.readouterr().out
    report = json.loads(out.read_text())
    stages = report["stages_mean_ms"]
    with capsys.disabled():
        print("\n" + text.rstrip())
    ok = (code == 0 and report["resolution"] == [640, 480] and (report["d_star"], report["d_nei"]) == (0.01, 0.04)
          and report["mean_fps"] >= 5.0 and all(s in text for s in stages))
    record_criterion(7, ok, f"mean {report['mean_fps']:.2f} fps over {report['frames']} frames at 640x480; "
                            + ", ".join(f"{k} {v:.1f} ms" for k, v in stages.items()))
    assert ok


def test_criterion_8_dropout_status_trace(mannequin):
    spec = dropout_spec(40)
    state = init_tracker(mannequin.body_from_map, RigidTransform.identity(), mannequin.mesh, spec.reference,
                         marker_map=mannequin.marker_map, intrinsics=spec.intrinsics)
    trace = [track_frame(state, f).status.value for f in iter_sequence(spec, mannequin)]
    code = "".join({"AwaitingAcquisition": "A", "Tracking": "T", "HoldingLastPose": "H"}[s] for s in trace)
    expected = "A" * 3 + "T" * 17 + "H" * 5 + "T" * 15
    ok = code == expected and re.fullmatch(r"A*T+H{5}T+", code) is not None
    record_criterion(8, ok, f"trace {code}")
    assert ok


def test_criterion_9_numerical_hygiene(rigid_audit, mannequin):
    pts, normals = sample_surface(mannequin.mesh, 500, np.random.default_rng(3))
    truth = perturbation(0.01, 2.0, np.random.default_rng(8))
    tgt, tgt_n = truth.apply(pts), normals @ truth.rotation.T
    p = IcpParams()
    cs = regularized_covariances(pts, 20, p.gicp_covariance_epsilon)
    ct = regularized_covariances(tgt, 20, p.gicp_covariance_epsilon)
    checks = []
    for pose in (perturbation(0.004, 1.0, np.random.default_rng(9)) @ truth, truth):
        q = pose.apply(pts)
        corr = find_correspondences(q, KdTree(tgt), 0.03)
        qq, tt, nn = q[corr.source], tgt[corr.target], tgt_n[corr.target]
        info = gicp_information(cs[corr.source], ct[corr.target], pose.rotation)
        g = gicp_objective(qq, tt, info)[1]
        checks.append(gradient_close(g, numeric_gradient(lambda d: gicp_objective(qq, tt, info, d, False)[0])))
        g = point_to_plane_objective(qq, tt, nn)[1]
        checks.append(gradient_close(g, numeric_gradient(
            lambda d: point_to_plane_objective(qq, tt, nn, d, False)[0])))
    ok = (rigid_audit["count"] > 0 and rigid_audit["ortho"] <= 1e-9 and rigid_audit["det"] <= 1e-9
          and all(checks))
    record_criterion(9, ok, f"{rigid_audit['count']} transforms, max |R^T R - I| {rigid_audit['ortho']:.1e}, "
                            f"max |det R - 1| {rigid_audit['det']:.1e}; gradient checks {sum(checks)}/{len(checks)}")
    assert ok
