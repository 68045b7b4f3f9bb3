import numpy as np
import pytest

from jointtrack.cloud import CameraIntrinsics
from jointtrack.markerpose import (corner_errors, estimate_pose, gather_correspondences, initial_pose,
                                   refine_pose, reprojection_error)
from jointtrack.se3 import RigidTransform, from_twist, inverse, perturbation, rotation_distance_deg, translation_distance
from jointtrack.simulate import DEFAULT_INTRINSICS, MarkerDetection, MarkerMap, NoiseModel, look_at, project_markers

K600 = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def _view(mannequin, eye, k=DEFAULT_INTRINSICS, noise=None, rng=None):
    """Detections and the true camera_from_map for a camera at ``eye`` looking at the body."""
    camera = look_at(eye, [0.0, 0.0, 0.0])
    det = project_markers(mannequin.marker_map, mannequin.body_from_map, camera, k, noise, rng)
    return det, inverse(camera) @ mannequin.body_from_map


def test_three_markers_noise_free(mannequin):
    det, truth = _view(mannequin, [0.05, 0.1, 0.7])
    det = det[:3]
    assert len(det) == 3
    est = estimate_pose(mannequin.marker_map, det, DEFAULT_INTRINSICS)
    assert est.success
    assert translation_distance(est.pose, truth) < 1e-6
    assert rotation_distance_deg(est.pose, truth) < 1e-5
    assert est.inlier_corner_count == 12
    assert est.mean_reprojection_error < 1e-6


def test_single_marker_fails(mannequin):
    det, _ = _view(mannequin, [0.05, 0.1, 0.7])
    est = estimate_pose(mannequin.marker_map, det[:1], DEFAULT_INTRINSICS)
    assert not est.success


def test_unknown_markers_ignored(mannequin):
    det, truth = _view(mannequin, [0.05, 0.1, 0.7])
    junk = [MarkerDetection(99, np.full((4, 2), 100.0)), MarkerDetection(98, np.full((4, 2), 50.0))]
    est = estimate_pose(mannequin.marker_map, det + junk, DEFAULT_INTRINSICS)
    assert est.success and translation_distance(est.pose, truth) < 1e-6


def _far_view(mannequin, seed):
    rng = np.random.default_rng(seed)
    eye = np.array([0.0, 0.0, 1.5]) + rng.normal(0, 0.1, 3) * [1, 1, 0]
    eye *= 1.5 / np.linalg.norm(eye)
    return _view(mannequin, eye, noise=NoiseModel(pixel_sigma=0.5), rng=rng)


@pytest.mark.xfail(strict=True, reason="below the information bound for a 28 cm marker map at 1.5 m; see "
                                       "test_noisy_estimate_is_maximum_likelihood")
def test_noisy_monte_carlo_at_one_and_a_half_meters(mannequin):
    t_err, r_err = [], []
    for seed in range(50):
        det, truth = _far_view(mannequin, seed)
        est = estimate_pose(mannequin.marker_map, det, DEFAULT_INTRINSICS)
        assert est.success
        t_err.append(translation_distance(est.pose, truth))
        r_err.append(rotation_distance_deg(est.pose, truth))
    assert np.percentile(t_err, 95) <= 0.002
    assert np.percentile(r_err, 95) <= 0.3


def _crlb_rotation_sigma_deg(obj, truth, k, sigma_px):
    """Per-axis rotation standard deviation from the Fisher information at the true pose."""
    def residual(x):
        c = (from_twist(x) @ truth).apply(obj)
        return k.project(c).ravel()
    jac = np.zeros((2 * len(obj), 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = 1e-7
        jac[:, i] = (residual(d) - residual(-d)) / 2e-7
    cov = sigma_px**2 * np.linalg.inv(jac.T @ jac)
    return np.degrees(np.sqrt(np.diag(cov)[:3]))


def test_noisy_estimate_is_maximum_likelihood(mannequin):
    r_err = []
    for seed in range(50):
        det, truth = _far_view(mannequin, seed)
        est = estimate_pose(mannequin.marker_map, det, DEFAULT_INTRINSICS)
        assert est.success
        obj, img, _ = gather_correspondences(mannequin.marker_map, det)
        # Gaussian noise: the least-squares optimum is never costlier than the truth
        assert est.cost_trace[-1] <= np.sum((DEFAULT_INTRINSICS.project(truth.apply(obj)) - img) ** 2) + 1e-9
        r_err.append(rotation_distance_deg(est.pose, truth))
    det, truth = _far_view(mannequin, 0)
    obj, _, _ = gather_correspondences(mannequin.marker_map, det)
    bound = _crlb_rotation_sigma_deg(obj, truth, DEFAULT_INTRINSICS, 0.5)
    # no unbiased estimator can beat 0.3 deg at the 95th percentile here
    assert bound[:2].min() > 0.3
    assert np.sqrt(np.mean(np.square(r_err))) <= 2.0 * np.linalg.norm(bound)


def test_prior_seeded_matches_dlt(mannequin):
    det, truth = _view(mannequin, [0.1, 0.2, 0.8])
    prior = perturbation(0.02, 3.0, np.random.default_rng(0)) @ truth
    est = estimate_pose(mannequin.marker_map, det, DEFAULT_INTRINSICS, prior=prior)
    assert est.success and translation_distance(est.pose, truth) < 1e-6


def test_bad_prior_falls_back_to_dlt(mannequin):
    det, truth = _view(mannequin, [0.1, 0.2, 0.8])
    flipped = RigidTransform(np.diag([1.0, -1.0, -1.0]), [0, 0, -2.0])  # everything behind the camera
    est = estimate_pose(mannequin.marker_map, det, DEFAULT_INTRINSICS, prior=flipped)
    assert est.success and translation_distance(est.pose, truth) < 1e-6


def test_reprojection_zero_at_truth(mannequin):
    det, truth = _view(mannequin, [0.0, 0.1, 0.7])
    assert reprojection_error(mannequin.marker_map, det, DEFAULT_INTRINSICS, truth) < 1e-9


def test_reprojection_lateral_offset():
    corners = np.array([[-0.02, 0.02, 0], [-0.02, -0.02, 0], [0.02, -0.02, 0], [0.02, 0.02, 0.0]])
    mmap = MarkerMap({0: corners}, 0.04)
    truth = RigidTransform(np.eye(3), [0, 0, 1.0])
    det = [MarkerDetection(0, K600.project(truth.apply(corners)))]
    shifted = RigidTransform(np.eye(3), [0.01, 0, 1.0])
    err = reprojection_error(mmap, det, K600, shifted)
    assert err == pytest.approx(6.0, abs=1e-9)  # planar target at constant depth: exactly fx * dx / z
    assert np.allclose(corner_errors(mmap, det, K600, shifted), 6.0)


def test_empty_detections(mannequin):
    assert reprojection_error(mannequin.marker_map, [], DEFAULT_INTRINSICS, RigidTransform.identity()) == 0.0
    est = estimate_pose(mannequin.marker_map, [], DEFAULT_INTRINSICS)
    assert not est.success and est.inlier_corner_count == 0


def test_monotone_information(mannequin):
    for eye in ([0.05, 0.1, 0.7], [0.3, 0.2, 0.6], [-0.2, -0.1, 0.75]):
        det, _ = _view(mannequin, eye)
        was_ok = False
        for n in range(1, len(det) + 1):
            ok = estimate_pose(mannequin.marker_map, det[:n], DEFAULT_INTRINSICS).success
            assert ok or not was_ok
            was_ok = ok
        assert was_ok


def test_gauss_newton_trace_non_increasing(mannequin):
    rng = np.random.default_rng(3)
    det, truth = _view(mannequin, [0.1, 0.1, 0.9], noise=NoiseModel(pixel_sigma=1.0), rng=rng)
    obj, img, _ = gather_correspondences(mannequin.marker_map, det)
    pose, trace = refine_pose(obj, img, DEFAULT_INTRINSICS, perturbation(0.03, 4.0, rng) @ truth)
    assert len(trace) > 1
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_dlt_initialisation_near_truth(mannequin):
    det, truth = _view(mannequin, [0.0, 0.3, 0.6])
    obj, img, _ = gather_correspondences(mannequin.marker_map, det)
    init = initial_pose(obj, img, DEFAULT_INTRINSICS)
    assert translation_distance(init, truth) < 1e-6


def test_planar_initialisation():
    corners = np.array([[-0.02, 0.02, 0], [-0.02, -0.02, 0], [0.02, -0.02, 0], [0.02, 0.02, 0.0]])
    mmap = MarkerMap({0: corners, 1: corners + [0.1, 0.0, 0.0]}, 0.04)
    truth = perturbation(0.05, 10.0, np.random.default_rng(1)) @ RigidTransform(np.eye(3), [0, 0, 0.8])
    det = [MarkerDetection(i, K600.project(truth.apply(c))) for i, c in mmap.markers.items()]
    est = estimate_pose(mmap, det, K600)
    assert est.success
    assert translation_distance(est.pose, truth) < 1e-6
