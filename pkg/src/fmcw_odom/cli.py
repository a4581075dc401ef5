"""Command-line entry point: ``fmcw-odom <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, OdomError

log = logging.getLogger("fmcw_odom")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--output-dir", type=Path, help="directory for outputs")
    p.add_argument("--seed", type=int, help="seed for RANSAC and the simulator")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmcw-odom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("odom", help="run the odometry pipeline on recorded sequences")
    _common(p)
    p.add_argument("sequences", nargs="*", type=Path,
                   help="sequence directories (default: sequence_dir from the config)")
    p.add_argument("--mode", choices=("filter", "batch"))
    p.add_argument("--jobs", type=int, default=1,
                   help="process independent sequences in parallel (each stays single-threaded)")
    p.add_argument("--no-masks", action="store_true", help="do not write per-frame inlier masks")

    p = sub.add_parser("calib", help="fit the per-bin Doppler bias model from groundtruth velocity")
    _common(p)
    p.add_argument("sequence", type=Path)
    p.add_argument("--groundtruth", type=Path, help="velocity CSV (default: <sequence>/groundtruth_velocity.csv)")
    p.add_argument("--no-ransac", action="store_true", help="use all returns, not only RANSAC inliers")

    p = sub.add_parser("simulate", help="generate a synthetic sequence with groundtruth")
    _common(p)

    p = sub.add_parser("evaluate", help="KITTI relative errors of an estimate against groundtruth")
    p.add_argument("estimate", type=Path)
    p.add_argument("groundtruth", type=Path)
    p.add_argument("--output", type=Path, help="CSV report path")
    p.add_argument("--max-dt", type=float, help="association window in seconds")

    p = sub.add_parser("bench", help="per-stage timing on synthetic frames")
    _common(p)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--points", type=int, default=100_000)

    p = sub.add_parser("observability", help="rank and nullspace of a sensor rig")
    p.add_argument("rig", nargs="?", type=Path, help="rig YAML file")
    p.add_argument("--preset", help="built-in rig: one, two, coincident, triangle, collinear, one+gyro")
    p.add_argument("--output", type=Path, help="CSV with rank, nullity and basis")
    return parser


def _load(args, **extra):
    from .config import load_config

    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["ransac_seed"] = args.seed
        overrides["sim_seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        overrides["output_dir"] = str(args.output_dir)
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, **overrides)


def _run_one(cfg, write_masks: bool):
    from threadpoolctl import threadpool_limits

    from .pipeline import run_odometry

    with threadpool_limits(limits=cfg.threads):
        path, manifest = run_odometry(cfg, write_masks=write_masks)
    return str(path), manifest.totals


def cmd_odom(args) -> int:
    cfg = _load(args, mode=args.mode)
    if not args.sequences:
        if cfg.sequence_dir is None:
            raise ConfigError("no sequence given on the command line or as sequence_dir")
        jobs = [cfg]
    else:
        base = Path(cfg.output_dir)
        multi = len(args.sequences) > 1
        jobs = [cfg.replace(sequence_dir=str(s),
                            output_dir=str(base / s.name) if multi else str(base))
                for s in args.sequences]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_one, jobs, [not args.no_masks] * len(jobs)))
    else:
        results = [_run_one(c, not args.no_masks) for c in jobs]
    for path, totals in results:
        print(f"{path}: {totals['frames']} frames, {totals['inliers']} inliers, "
              f"{totals['gyro_gaps']} gyro gaps")
    return EXIT_OK


def cmd_calib(args) -> int:
    from .bias import build_calibration_samples, fit, rms_by_range, save_bias_model
    from .pipeline import open_sequence
    from .sim import VelocityTable

    cfg = _load(args)
    seq = open_sequence(args.sequence, use_gyro=True)
    gt_path = args.groundtruth or args.sequence / "groundtruth_velocity.csv"
    if not Path(gt_path).exists():
        raise DataError(f"groundtruth velocity file not found: {gt_path}")
    gt = VelocityTable.from_csv(gt_path)
    grid = cfg.grid()
    samples = build_calibration_samples(seq.frames(cfg), gt, cfg.lidar_extrinsics(), grid,
                                        None if args.no_ransac else cfg.ransac())
    model = fit(samples, grid.shape, cfg.calib_min_samples, cfg.calib_min_range_spread_m)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bias_model(model, out / "bias_model.csv")
    print(f"calibrated {int(model.valid.sum())} of {model.valid.size} bins "
          f"from {len(samples)} returns")
    bands = rms_by_range(samples, model, np.arange(0.0, 160.0, 20.0))
    with (out / "bias_rms_by_range.csv").open("w") as fh:
        fh.write("range_lo,range_hi,n,rms_before,rms_after\n")
        for b in bands:
            fh.write(f"{b['range_lo']:g},{b['range_hi']:g},{b['n']},{b['rms_before']:.6g},{b['rms_after']:.6g}\n")
            if b["n"]:
                print(f"  {b['range_lo']:5.0f}-{b['range_hi']:<5.0f} m  n={b['n']:8d}  "
                      f"rms {b['rms_before']:.4f} -> {b['rms_after']:.4f} m/s")

    # offline gyro bias: mean residual against the groundtruth angular velocity
    t0, t1 = gt.span
    g = seq.gyro.window(t0, t1)
    if len(g):
        pred = gt.velocity(g.timestamps)[:, 3:] @ cfg.gyro_extrinsics().R_sv.T
        bias = (g.rates - pred).mean(axis=0)
        (out / "gyro_bias.txt").write_text(" ".join(f"{b:.9e}" for b in bias) + "\n")
        print("gyro bias [rad/s]: " + " ".join(f"{b:+.3e}" for b in bias))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import generate

    cfg = _load(args)
    out = Path(cfg.output_dir)
    seq, _ = generate(cfg.sim_config(), out)
    print(f"wrote {len(seq)} frames to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .integrator import read_trajectory
    from .metrics import kitti_errors, write_error_report

    est = read_trajectory(args.estimate)
    gt = read_trajectory(args.groundtruth)
    report = kitti_errors(est, gt, max_dt=args.max_dt)
    if report.empty:
        print("trajectory shorter than the shortest segment length; no errors computed")
        return EXIT_OK
    for length in report.lengths:
        print(f"{length:4d} m  trans {report.trans_pct[length]:.4f} %  "
              f"rot {report.rot_deg_per_100m[length]:.5f} deg/100m")
    print(f" all    trans {report.mean_trans_pct:.4f} %  rot {report.mean_rot_deg_per_100m:.5f} deg/100m")
    if args.output:
        write_error_report(report, args.output)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import timing_harness, write_timing_report
    from .pipeline import bench_stages
    from .sim import SimConfig, Sequence

    cfg = _load(args)
    period = 0.1
    seq = Sequence(SimConfig(duration=args.frames * period, returns_per_frame=args.points,
                             doppler_noise=0.02, outlier_fraction=0.1, seed=cfg.sim_seed))
    records = [(f.frame_index, np.column_stack([f.timestamps, f.points, f.doppler,
                                                f.beam_row.astype(float)]))
               for f in seq.frames()]
    stages = bench_stages(cfg, 0.0, period, gyro=seq.gyro)
    report = timing_harness(stages, records, threads=cfg.threads)
    for name, mean, p95 in report.rows():
        print(f"{name:>10s}  mean {mean:8.3f} ms  p95 {p95:8.3f} ms")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_timing_report(report, out / "timing.csv")
    return EXIT_OK


def cmd_observability(args) -> int:
    from .observability import analyze, format_report, load_rig, preset_rig, write_report_csv

    if (args.rig is None) == (args.preset is None):
        raise ConfigError("give either a rig file or --preset")
    rig = load_rig(args.rig) if args.rig else preset_rig(args.preset)
    report = analyze(rig)
    print(format_report(report))
    if args.output:
        write_report_csv(report, args.output)
    return EXIT_OK


COMMANDS = {"odom": cmd_odom, "calib": cmd_calib, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate, "bench": cmd_bench, "observability": cmd_observability}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OdomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
