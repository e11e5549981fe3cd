"""Command-line entry point (``cskf-bench``)."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import bench, mapper, sim
from .config import load_config, parse_seeds
from .errors import CSKFError
from .localizer import MODES

log = logging.getLogger("cskf")


def _config(args):
    return load_config(args.config) if getattr(args, "config", None) else bench.ExperimentConfig()


def _dump(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)


# ---------------------------------------------------------------- sim

def cmd_sim_generate(args):
    cfg = _config(args)
    world, ms, session = bench.build_world(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    sim.write_session_csv(session, args.out)
    with open(os.path.join(args.out, "world.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "z", "radius", "in_map"])
        for fid, p, r, m in zip(world.ids, world.points, world.radius, world.in_map_session):
            w.writerow([int(fid), *(repr(float(x)) for x in p), repr(float(r)), int(m)])
    _dump({"frames": len(session.frames), "imu_samples": len(session.imu_t), "features": len(world),
           "mapping_keyframes": len(ms.frames), "out": args.out})


# ---------------------------------------------------------------- map

def _build_bundle(cfg, seed, submaps):
    _, ms, _ = bench.build_world(cfg, seed)
    if submaps <= 1:
        res, prob = mapper.build_map_bls(ms)
        return mapper.bundle_from_bls(res, prob, ms)
    return mapper.build_submaps(ms, submaps)


def cmd_map_build(args):
    cfg = _config(args)
    bundle = _build_bundle(cfg, args.seed, args.submaps)
    mapper.export_bundle(args.out, bundle)
    _dump({"out": args.out, "submaps": bench.memory_report(bundle)})


def cmd_map_partition(args):
    cfg = _config(args)
    _, ms, _ = bench.build_world(cfg, args.seed)
    part = mapper.partition_submaps(ms, args.submaps)
    _dump({"ranges": part.ranges, "features": [int(len(f)) for f in part.features],
           "common": int(len(part.common))})


def cmd_map_export(args):
    bundle = mapper.import_bundle(args.bundle)
    os.makedirs(args.out, exist_ok=True)
    for i, s in enumerate(bundle.submaps):
        with open(os.path.join(args.out, f"submap{i}_features.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "z", "anchor"])
            for fid, p, a in zip(s.feature_ids, s.feature_positions(), s.anchor):
                w.writerow([int(fid), *(repr(float(x)) for x in p), int(a)])
        with open(os.path.join(args.out, f"submap{i}_poses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "qx", "qy", "qz", "qw", "px", "py", "pz"])
            for t, q, p in zip(s.pose_t, s.pose_q, s.pose_p):
                w.writerow([repr(float(t)), *(repr(float(x)) for x in np.r_[q, p])])
    _dump({"out": args.out, "submaps": len(bundle.submaps)})


def cmd_map_inspect(args):
    bundle = mapper.import_bundle(args.bundle)
    _dump({"submaps": bench.memory_report(bundle), "inter_transforms": bundle.inter_transforms.tolist(),
           "sigma": bundle.sigma, "version": mapper.BUNDLE_VERSION})


# ---------------------------------------------------------------- run

def cmd_run(args):
    cfg = _config(args)
    updates = {"modes": (args.mode,), "out_dir": args.out}
    if args.seed is not None:
        updates["seeds"] = parse_seeds(args.seed)
    if args.submaps is not None:
        updates["submaps"] = args.submaps
    if args.sigma_inflated is not None:
        updates["sigma_inflated"] = args.sigma_inflated
    cfg = dataclasses.replace(cfg, **updates).validate()
    report = bench.run_experiment(cfg, workers=bench.worker_count())
    _dump({"out": args.out, "modes": report.aggregate()})


# ---------------------------------------------------------------- bench

def cmd_bench_backsolve(args):
    durations = tuple(float(x) for x in args.durations.split(","))
    rows, slope = bench.backsolve_series(durations, reps=args.reps, seed=args.seed)
    out = {"rows": rows, "loglog_slope": slope}
    if args.out:
        _write_rows(os.path.join(args.out, "backsolve.csv"), rows)
    _dump(out, os.path.join(args.out, "backsolve.json") if args.out else None)


def cmd_bench_memory(args):
    dims = tuple(int(x) for x in args.dims.split(","))
    rows, slope = bench.memory_series(dims, seed=args.seed)
    if args.out:
        _write_rows(os.path.join(args.out, "memory.csv"), rows)
    _dump({"rows": rows, "nnz_loglog_slope": slope}, os.path.join(args.out, "memory.json") if args.out else None)


def _write_rows(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- verify

def cmd_verify(args):
    results = bench.verify_suite(quick=args.quick, seed=args.seed)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="cskf-bench", description="Map-based visual-inertial localization harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp_sim = sub.add_parser("sim", help="synthetic data").add_subparsers(dest="sim_cmd", required=True)
    g = sp_sim.add_parser("generate", help="write a localization session, its world and truth as CSV")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sim_generate)

    sp_map = sub.add_parser("map", help="map building and bundles").add_subparsers(dest="map_cmd", required=True)
    b = sp_map.add_parser("build", help="build a map bundle from a simulated mapping session")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--submaps", type=int, default=1)
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_map_build)
    pt = sp_map.add_parser("partition", help="show the time-even sub-map split")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--submaps", type=int, default=2)
    pt.add_argument("--config")
    pt.set_defaults(func=cmd_map_partition)
    ex = sp_map.add_parser("export", help="dump a bundle's poses and features as CSV")
    ex.add_argument("bundle")
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_map_export)
    ins = sp_map.add_parser("inspect", help="summarize a bundle")
    ins.add_argument("bundle")
    ins.set_defaults(func=cmd_map_inspect)

    r = sub.add_parser("run", help="run one estimator mode over one or more seeds")
    r.add_argument("--mode", choices=MODES, required=True)
    r.add_argument("--submaps", type=int)
    r.add_argument("--seed", help="seed or list, e.g. 3 or 0-19")
    r.add_argument("--sigma-inflated", type=float)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    sp_b = sub.add_parser("bench", help="scaling benchmarks").add_subparsers(dest="bench_cmd", required=True)
    bs = sp_b.add_parser("backsolve", help="single-feature back-solve time against map size")
    bs.add_argument("--durations", default="5,10,20", help="mapping durations (s) of the room maps")
    bs.add_argument("--reps", type=int, default=100)
    bs.add_argument("--seed", type=int, default=0)
    bs.add_argument("--out")
    bs.set_defaults(func=cmd_bench_backsolve)
    bm = sp_b.add_parser("memory", help="factor storage against dense covariance storage")
    bm.add_argument("--dims", default="500,1000,2000,4000")
    bm.add_argument("--seed", type=int, default=0)
    bm.add_argument("--out")
    bm.set_defaults(func=cmd_bench_memory)

    v = sub.add_parser("verify", help="run the property battery")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except CSKFError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
