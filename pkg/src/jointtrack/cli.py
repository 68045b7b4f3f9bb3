"""Command-line front end: simulate, reconstruct, align, track, evaluate, bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config, with_xtion_profile
from .errors import (AlignmentFailed, ConfigError, DegenerateInput, JointTrackError, LengthMismatch,
                     NoCorrespondences, SingularNormalMatrix)
from .evaluate import evaluate_sequence, format_table, frame_rates, split_half_calibrate, write_eval_csv, write_summary
from .formats import (POSE_COLUMNS, SequenceReader, load_cloud, read_ground_truth, read_pose, save_cloud,
                      write_pose, write_sequence)
from .pipeline import (STAGES, TrackResult, align_reference_model, init_tracker, reconstruct_body, track_frame,
                       used_frame_indices)
from .raycast import Bvh
from .se3 import RigidTransform, from_pose_fields, inverse, perturbation, pose_fields
from .simulate import (SequenceSpec, dropout_spec, iter_sequence, make_mannequin, reconstruction_spec,
                       simulate_frame, tracking_spec)

logger = logging.getLogger("jointtrack")

EXIT_OK, EXIT_BAD_INPUT, EXIT_FAILED = 0, 2, 3
SCENARIOS = ["reconstruction", *(f"track-{i}" for i in range(1, 7)), "dropout"]
RESULT_COLUMNS = ["frame", "status", *POSE_COLUMNS, "rot_err_deg", "trans_err_mm", "degraded"]
T_HAT_FILE, T_REFINED_FILE, MARKER_TO_MODEL_FILE = "t_hat.txt", "t_refined.txt", "marker_to_model.txt"


ALGORITHMIC_FAILURES = (AlignmentFailed, NoCorrespondences, SingularNormalMatrix, DegenerateInput)


class BadInput(JointTrackError):
    pass


def scenario_spec(name: str, frames: int, cfg: Config) -> SequenceSpec:
    noise = dataclasses.replace(cfg.noise, seed=cfg.seed)
    if name == "reconstruction":
        spec = reconstruction_spec(frames, noise, seed=cfg.seed)
    elif name == "dropout":
        spec = dataclasses.replace(dropout_spec(frames, seed=cfg.seed), noise=noise)
    elif name.startswith("track-"):
        spec = tracking_spec(int(name[6:]), frames, noise, seed=cfg.seed)
    else:
        raise BadInput(f"unknown scenario {name!r}")
    return dataclasses.replace(spec, intrinsics=cfg.intrinsics)


def _config(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "xtion_profile", False):
        cfg = with_xtion_profile(cfg)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise BadInput(f"output directory {out} is not empty (use --force)")
    if args.frames < 1:
        raise BadInput("--frames must be at least 1")
    spec = scenario_spec(args.scenario, args.frames, cfg)
    body = make_mannequin(args.resolution)
    frames = list(iter_sequence(spec, body))
    meta = {"scenario": args.scenario, "frames": args.frames, "seed": cfg.seed,
            "noise": dataclasses.asdict(spec.noise), "resolution": args.resolution, "version": __version__}
    write_sequence(out, frames, body, spec.intrinsics, spec.reference, meta)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    seq = SequenceReader(args.sequence)
    used = used_frame_indices(seq.indices, cfg.reconstruction.frame_skip)
    result = reconstruct_body(seq.frames(used), seq.intrinsics, seq.marker_map, cfg.reconstruction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "reconstruction.ply", result.cloud)
    with open(out / "reconstruction_poses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "marker_success", *POSE_COLUMNS])
        for i in result.used:
            w.writerow([i, int(i in result.marker_poses), *map(repr, pose_fields(result.poses[i]))])
    write_pose(out / T_HAT_FILE, result.t_hat)
    print(f"reconstruction: {len(result.cloud)} points from {len(result.used)} frames "
          f"({len(result.succeeded)} with markers) -> {out}")
    return EXIT_OK


def _manual_alignment(cfg: Config, seq: SequenceReader) -> RigidTransform:
    """Config value, else a deterministic rough guess derived from ground truth."""
    manual = cfg.manual_alignment()
    if manual is not None:
        return manual
    if not seq.ground_truth:
        raise BadInput("config has no t_manual and the sequence has no ground truth to derive one from")
    truth = inverse(seq.ground_truth[seq.indices[0]].body_pose)  # model_from_world
    rng = np.random.default_rng([cfg.seed, 17])
    logger.info("t_manual not configured; using ground truth perturbed by 2 cm / 3 deg")
    return perturbation(0.02, 3.0, rng) @ truth


def cmd_align(args) -> int:
    cfg = _config(args)
    seq = SequenceReader(args.sequence)
    recon_dir = Path(args.recon)
    cloud_path = recon_dir / "reconstruction.ply"
    for p in (cloud_path, recon_dir / T_HAT_FILE):
        if not p.is_file():
            raise BadInput(f"missing reconstruction artifact: {p}")
    result = align_reference_model(load_cloud(cloud_path), seq.body_model().mesh,
                                   _manual_alignment(cfg, seq), cfg.align.icp)
    if not result.converged:
        logger.warning("reference alignment did not converge in %d iterations", result.iterations)
    write_pose(recon_dir / T_REFINED_FILE, result.transform)
    t_hat = read_pose(recon_dir / T_HAT_FILE)
    write_pose(recon_dir / MARKER_TO_MODEL_FILE, result.transform @ t_hat)
    print(f"alignment: {result.iterations} iterations, converged={result.converged}, "
          f"objective={result.final_objective:.6g}")
    return EXIT_OK


def _result_row(r: TrackResult) -> list[str]:
    pose = r.world_pose
    fields = [""] * 7 if pose is None else [repr(v) for v in pose_fields(pose)]
    err = ["", ""] if r.rotational_error_deg is None else [repr(r.rotational_error_deg), repr(r.translational_error_mm)]
    return [str(r.frame_index), r.status.value, *fields, *err, str(int(r.degraded))]


def cmd_track(args) -> int:
    cfg = _config(args)
    recon_dir = Path(args.recon)
    for name in (T_HAT_FILE, T_REFINED_FILE):
        if not (recon_dir / name).is_file():
            raise BadInput(f"missing {name} in {recon_dir}")
    t_hat, t_refined = read_pose(recon_dir / T_HAT_FILE), read_pose(recon_dir / T_REFINED_FILE)
    seq = SequenceReader(args.sequence)
    p_u_ref = cfg.reference_pose() or seq.reference_pose
    if p_u_ref is None:
        logger.warning("no reference pose configured; using identity")
        p_u_ref = RigidTransform.identity()
    state = init_tracker(t_hat, t_refined, seq.body_model().mesh, p_u_ref, cfg.tracking,
                         marker_map=seq.marker_map, intrinsics=seq.intrinsics)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    timings_path = Path(args.timings) if args.timings else out.with_name(out.stem + "_timings.csv")
    with open(out, "w", newline="") as fh, open(timings_path, "w", newline="") as th:
        w, tw = csv.writer(fh, lineterminator="\n"), csv.writer(th, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        tw.writerow(["frame", *(f"{s}_us" for s in STAGES)])
        counts: dict[str, int] = {}
        for frame in seq.frames():
            r = track_frame(state, frame, cfg.tracking)
            w.writerow(_result_row(r))
            tw.writerow([r.frame_index, *(f"{r.timings_us.get(s, 0.0):.1f}" for s in STAGES)])
            counts[r.status.value] = counts.get(r.status.value, 0) + 1
    print(f"tracked {len(seq)} frames -> {out} ({', '.join(f'{k}: {v}' for k, v in sorted(counts.items()))})")
    return EXIT_OK


def read_results(path) -> list[tuple[int, RigidTransform | None]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pose = None if row["tx"] == "" else from_pose_fields([row[c] for c in POSE_COLUMNS])
            out.append((int(row["frame"]), pose))
    return out


def read_timings(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k[:-3]: float(v) for k, v in row.items() if k.endswith("_us")} for row in csv.DictReader(fh)]


def cmd_evaluate(args) -> int:
    if len(args.results) != len(args.ground_truth):
        raise BadInput("give one --ground-truth per --results")
    timings = args.timings or []
    if timings and len(timings) != len(args.results):
        raise BadInput("give one --timings per --results, or none")
    evals = []
    for i, (res_path, gt_path) in enumerate(zip(args.results, args.ground_truth)):
        results = read_results(res_path)
        truth = read_ground_truth(gt_path)
        if len(results) != len(truth):
            raise LengthMismatch(f"{res_path} has {len(results)} frames but {gt_path} has {len(truth)}")
        missing = [f for f, _ in results if f not in truth]
        if missing:
            raise LengthMismatch(f"frame {missing[0]} of {res_path} has no ground truth")
        est = [p for _, p in results]
        gt = [truth[f].body_pose for f, _ in results]
        rates = []
        if timings:
            tracked = [t for t, (_, p) in zip(read_timings(timings[i]), results) if p is not None]
            rates = frame_rates(tracked)
        cal = split_half_calibrate(est, gt)
        name = Path(res_path).stem if len(set(Path(r).stem for r in args.results)) == len(args.results) \
            else Path(res_path).parent.name
        evals.append(evaluate_sequence(est, gt, cal, rates, name))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in evals:
        write_eval_csv(out / f"{e.name}_errors.csv", e)
    write_summary(out / "summary.json", evals)
    table = format_table(evals)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_bench(args) -> int:
    """Tracking throughput on a simulated sequence; rendering is excluded from timing."""
    cfg = _config(args)
    spec = scenario_spec(args.scenario, args.frames, cfg)
    body = make_mannequin()
    bvh = Bvh.build(body.mesh)
    state = init_tracker(body.body_from_map, RigidTransform.identity(), body.mesh, spec.reference, cfg.tracking,
                         marker_map=body.marker_map, intrinsics=spec.intrinsics)
    # warm-up outside the timed loop (JIT compilation and caches)
    track_frame(init_tracker(body.body_from_map, RigidTransform.identity(), body.mesh, spec.reference, cfg.tracking,
                             marker_map=body.marker_map, intrinsics=spec.intrinsics),
                simulate_frame(spec, body, bvh, 1), cfg.tracking)
    timings = []
    for i in range(1, args.frames + 1):
        frame = simulate_frame(spec, body, bvh, i)
        r = track_frame(state, frame, cfg.tracking)
        if r.patient_pose is not None:
            timings.append(r.timings_us)
    if len(timings) < 2:
        raise BadInput("fewer than two tracked frames; cannot measure throughput")
    rates = frame_rates(timings)
    report = {
        "frames": len(timings),
        "mean_fps": float(np.mean(rates)),
        "median_frame_ms": float(np.median([t["total"] for t in timings]) / 1e3),
        "stages_mean_ms": {s: float(np.mean([t[s] for t in timings]) / 1e3) for s in STAGES},
        "d_star": cfg.tracking.d_star,
        "d_nei": cfg.tracking.d_nei,
        "resolution": [spec.intrinsics.width, spec.intrinsics.height],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"mean fps: {report['mean_fps']:.2f} over {report['frames']} frames "
          f"({spec.intrinsics.width}x{spec.intrinsics.height}, d*={cfg.tracking.d_star}, d_nei={cfg.tracking.d_nei})")
    for s in STAGES:
        print(f"  {s:<11s}{report['stages_mean_ms'][s]:8.2f} ms")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointtrack", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--xtion-profile", action="store_true",
                       help="tracking voxel 0.02 m and neighborhood 0.10 m instead of 0.01 / 0.04")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("simulate", help="write a synthetic sequence directory")
    common(p)
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--frames", type=int, default=300, help="number of frames (default 300)")
    p.add_argument("--scenario", choices=SCENARIOS, default="reconstruction", help="motion script")
    p.add_argument("--resolution", type=int, default=32, help="mannequin mesh resolution")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="body reconstruction and marker-map alignment")
    common(p)
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--out", required=True, help="directory for reconstruction artifacts")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("align", help="register the reconstruction to the reference model")
    common(p)
    p.add_argument("sequence", help="sequence directory holding the reference model")
    p.add_argument("--recon", required=True, help="reconstruction directory (results are written here)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("track", help="track every frame of a sequence")
    common(p)
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--recon", required=True, help="directory with t_hat.txt and t_refined.txt")
    p.add_argument("--out", required=True, help="per-frame results CSV")
    p.add_argument("--timings", help="per-frame stage timings CSV (default: <out>_timings.csv)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="split-half accuracy against ground truth")
    p.add_argument("--results", action="append", required=True, help="results CSV (repeatable)")
    p.add_argument("--ground-truth", action="append", required=True, help="ground_truth.csv, one per --results")
    p.add_argument("--timings", action="append", help="timings CSV, one per --results (optional)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="tracking throughput on a simulated sequence")
    common(p)
    p.add_argument("--frames", type=int, default=100, help="frames to track (default 100)")
    p.add_argument("--scenario", choices=SCENARIOS[1:], default="track-1", help="motion script")
    p.add_argument("--out", help="optional JSON report")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ALGORITHMIC_FAILURES as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, BadInput, LengthMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (JointTrackError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
