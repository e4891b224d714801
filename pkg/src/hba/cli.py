"""Command-line entry point: ``hba run | eval | synth | plan | bench``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

from . import evaluation, io, pipeline, pyramid, synth
from .config import KEYS, dump_config, load_config
from .errors import ConfigError, HbaError, InputError

log = logging.getLogger("hba")


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("mode", "w", "s", "n", "l", "max_passes"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def cmd_run(args):
    cfg = load_config(args.config, _overrides(args))
    log.info("configuration:\n%s", dump_config(cfg).rstrip())
    frames = io.load_sequence(args.scans, args.poses, cfg.io.scan_format or None,
                              cfg.io.pose_format, cfg.io.filter_size, cfg.io.filter_enabled,
                              workers=cfg.pipeline.pyramid.n)
    log.info("loaded %d frames, %d points", len(frames), sum(len(f.points) for f in frames))
    t0 = time.perf_counter()
    result = pipeline.run(frames, config=cfg.pipeline)
    log.info("finished in %.2f s", time.perf_counter() - t0)
    pipeline.write_report(result.reports, sys.stdout)
    if args.report:
        pipeline.write_report(result.reports, args.report)
    if args.out_poses:
        io.write_trajectory(result.trajectory, args.out_poses, cfg.io.pose_format)
    if args.out_map:
        io.write_map(frames, result.trajectory, args.out_map)
    if args.figure:
        from .plotting import plot_run
        gt = io.load_trajectory(args.gt, cfg.io.pose_format) if args.gt else None
        plot_run({"input": [f.pose for f in frames], cfg.pipeline.mode: result.trajectory},
                 result.reports, args.figure, gt)
    if args.gt:
        gt = io.load_trajectory(args.gt, cfg.io.pose_format)
        print(evaluation.ate(result.trajectory, gt).line())
    if result.error is not None:
        raise result.error
    return 0


def cmd_eval(args):
    if args.metric == "ate":
        gt = io.load_trajectory(args.gt, args.format)
        est = io.load_trajectory(args.est, args.format)
        print(evaluation.ate(est, gt).line())
    else:
        if not os.path.exists(args.map):
            raise InputError(f"map: not found ({args.map})")
        pts = io.load_scan(args.map)
        score = evaluation.mme(pts, args.radius, stride=args.stride)
        print(f"mme={score:.6f} radius={args.radius:g}")
    return 0


def cmd_synth(args):
    if not os.path.exists(args.spec):
        raise InputError(f"spec: not found ({args.spec})")
    with open(args.spec) as fh:
        spec = synth.parse_scene_spec(fh.read())
    data = synth.generate(spec)
    synth.save(data, args.out)
    print(f"frames={len(data.frames)} points={sum(len(f.points) for f in data.frames)} "
          f"end_gap_m={data.end_gap:.6f} out={args.out}")
    return 0


def cmd_plan(args):
    N, w, s, n = args.frames, args.w, args.s, args.n
    if N < 2 or w < 2 or s < 2 or n < 1:
        raise ConfigError("need frames >= 2, w >= 2, s >= 2, n >= 1")
    cap = pyramid.layer_cap(N, w, s)
    out = csv.writer(sys.stdout)
    out.writerow(["l", "T_l", "feasible"])
    for l in range(1, cap + 2):
        out.writerow([l, f"{pyramid.predict_cost(N, w, s, n, l):.6g}", int(l <= cap)])
    print(f"closed_form_l={pyramid.closed_form_l(N, w, s, n)} cap={cap} "
          f"chosen_l={pyramid.select_layers(N, w, s, n)}")
    if args.figure:
        from .plotting import plot_cost_model
        plot_cost_model(N, w, s, n, args.figure)
    return 0


def bench_scene(frames, seed=0, noise=0.02, drift_rot_deg=0.1, drift_t=0.02):
    spec = synth.SceneSpec(
        trajectory=synth.TrajectorySpec(frames=frames),
        perturbation=synth.PerturbationSpec(0.0, 0.0, drift_rot_deg, drift_t), seed=seed)
    spec.sensor.noise = noise
    return synth.generate(spec)


def cmd_bench(args):
    rows = []
    out = csv.writer(sys.stdout)
    out.writerow(["frames", "mode", "workers", "wall_s", "passes", "rot_rmse_deg",
                  "trans_rmse_m", "input_trans_rmse_m", "rss_mb_estimate"])
    for N in args.frames:
        data = bench_scene(N, args.seed)
        base = evaluation.ate(data.perturbed, data.ground_truth)
        for mode in args.modes:
            cfg = load_config(None, {"mode": mode, "n": args.n, "max_passes": args.max_passes})
            t0 = time.perf_counter()
            res = pipeline.run(data.frames, config=cfg.pipeline)
            wall = time.perf_counter() - t0
            a = evaluation.ate(res.trajectory, data.ground_truth)
            row = dict(frames=N, mode=mode, workers=args.n, wall_s=wall, passes=len(res.reports),
                       rot_rmse_deg=a.rot_rmse_deg, trans_rmse_m=a.trans_rmse_m,
                       input=base.trans_rmse_m,
                       rss=res.reports[-1].rss_mb_estimate if res.reports else 0.0)
            rows.append(row)
            out.writerow([N, mode, args.n, f"{wall:.3f}", row["passes"], f"{a.rot_rmse_deg:.6f}",
                          f"{a.trans_rmse_m:.6f}", f"{base.trans_rmse_m:.6f}", f"{row['rss']:.1f}"])
            sys.stdout.flush()
    if args.figure:
        from .plotting import plot_bench
        plot_bench(rows, args.figure)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hba", description="Hierarchical LiDAR map refinement.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="refine a trajectory")
    r.add_argument("--scans", required=True, help="directory of scan files")
    r.add_argument("--poses", required=True, help="initial trajectory")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--mode", choices=pipeline.MODES)
    r.add_argument("--w", type=int)
    r.add_argument("--s", type=int)
    r.add_argument("--n", type=int)
    r.add_argument("--l", type=int)
    r.add_argument("--max-passes", dest="max_passes", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override a config key ({', '.join(KEYS)})")
    r.add_argument("--out-poses")
    r.add_argument("--out-map", help="merged map as binary PLY")
    r.add_argument("--report", help="per-pass CSV report")
    r.add_argument("--figure", help="trajectory / cost figure (png, pdf, ...)")
    r.add_argument("--gt", help="ground truth trajectory; prints ATE")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="trajectory / map metrics")
    esub = e.add_subparsers(dest="metric", required=True)
    ea = esub.add_parser("ate")
    ea.add_argument("--gt", required=True)
    ea.add_argument("--est", required=True)
    ea.add_argument("--format", default="kitti", choices=io.POSE_FORMATS)
    em = esub.add_parser("mme")
    em.add_argument("--map", required=True)
    em.add_argument("--radius", type=float, default=0.5)
    em.add_argument("--stride", type=int, default=1, help="evaluate every k-th point")
    e.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="write a synthetic fixture")
    sy.add_argument("--spec", required=True)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    pl = sub.add_parser("plan", help="layer-count planning table")
    pl.add_argument("--frames", type=int, required=True)
    pl.add_argument("--w", type=int, default=10)
    pl.add_argument("--s", type=int, default=5)
    pl.add_argument("--n", type=int, default=8)
    pl.add_argument("--figure")
    pl.set_defaults(func=cmd_plan)

    b = sub.add_parser("bench", help="time and accuracy of the modes on synthetic loops")
    b.add_argument("--frames", type=int, nargs="+", default=[100, 200])
    b.add_argument("--modes", nargs="+", default=["hierarchical", "original_ba"],
                   choices=pipeline.MODES)
    b.add_argument("--n", type=int, default=8)
    b.add_argument("--max-passes", dest="max_passes", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--figure")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error stage={exc.stage} {exc}", file=sys.stderr)
        return 2
    except HbaError as exc:
        print(f"error stage={exc.stage} {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error stage=io {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
