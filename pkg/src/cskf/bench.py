"""Experiment drivers: mode sweeps over seeds, NEES statistics, memory and
back-solve scaling series, and the verifier battery behind ``cskf verify``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.stats import chi2

from . import filter as flt
from . import localizer as loc
from . import mapper, matcher, sim, sparse
from .errors import ConfigError, SingularCovariance
from .geom import (CameraModel, MapTransform4DoF, local_feature_jacobians, mapped_feature_jacobians,
                   quat_exp, quat_multiply, quat_normalize, quat_to_rot)

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def worker_count():
    """Worker pool size: ``CSKF_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("CSKF_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"CSKF_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError("CSKF_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------- NEES

def nees_interval(dof, n_runs=1, prob=0.95):
    """Two-sided ``prob`` interval of the average of ``n_runs`` chi-square
    draws with ``dof`` degrees of freedom."""
    a = (1.0 - prob) / 2.0
    n = dof * n_runs
    return chi2.ppf(a, n) / n_runs, chi2.ppf(1.0 - a, n) / n_runs


def nees_series(errors, covariances, window=10, prob=0.95):
    """Per-frame NEES, its moving average and the single-frame chi-square
    bounds.

    ``errors`` is (K, d) and ``covariances`` (K, d, d).
    """
    errors = np.asarray(errors, dtype=float)
    covariances = np.asarray(covariances, dtype=float)
    K, d = errors.shape
    nees = np.empty(K)
    for k in range(K):
        try:
            L = np.linalg.cholesky(covariances[k])
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"covariance of frame {k} is not positive definite") from exc
        y = np.linalg.solve(L, errors[k])
        nees[k] = y @ y
    w = max(1, min(window, K))
    kernel = np.ones(w) / w
    windowed = np.convolve(nees, kernel, mode="valid") if K else nees
    lo, hi = nees_interval(d, 1, prob)
    outside = float(np.mean((nees < lo) | (nees > hi))) if K else 0.0
    return {"nees": nees, "windowed": windowed, "lower": lo, "upper": hi,
            "mean": float(nees.mean()) if K else float("nan"), "fraction_outside": outside}


# ---------------------------------------------------------------- experiments

@dataclass
class ExperimentConfig:
    modes: tuple = ("cskf", "scskf", "inflated", "nomap")
    submaps: int = 2
    seeds: tuple = (0,)
    map_duration: float = 10.0
    run_duration: float = 25.0
    n_features: int = 250
    map_variant: int = 0
    run_variant: int = 1
    revisit_count: int = 3
    # one mapping loop gives time-split sub-maps partial, not total, overlap
    map_revisit_count: int = 1
    sigma_inflated: float = 7.5
    inject_rate: float = 0.0
    noise: sim.NoiseConfig = field(default_factory=sim.NoiseConfig)
    out_dir: str | None = None

    def validate(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for m in self.modes:
            if m not in loc.MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if "scskf" in self.modes and self.submaps < 2:
            raise ConfigError("scskf needs at least two sub-maps")
        if self.sigma_inflated <= 0:
            raise ConfigError("sigma_inflated must be positive")
        return self


def build_world(cfg: ExperimentConfig, seed):
    """World, mapping session and localization session of one seed."""
    world = sim.make_room_world(n_features=cfg.n_features, seed=seed)
    ms = sim.generate_mapping_session(
        sim.TrajectorySpec(duration=cfg.map_duration, variant=cfg.map_variant,
                           revisit_count=cfg.map_revisit_count),
        world, cfg.noise, seed=seed + 100)
    session = sim.generate_session(
        sim.TrajectorySpec(duration=cfg.run_duration, variant=cfg.run_variant, revisit_count=cfg.revisit_count),
        world, cfg.noise, seed=seed + 200)
    return world, ms, session


def run_seed(cfg: ExperimentConfig, seed, cam=None):
    """Every configured mode on one seed; returns ``{mode: RunResult}``."""
    cam = cam or CameraModel()
    _, ms, session = build_world(cfg, seed)
    full = sub = None
    if any(m in cfg.modes for m in ("cskf", "inflated", "oracle")):
        bls, prob = mapper.build_map_bls(ms, cam)
        full = mapper.bundle_from_bls(bls, prob, ms)
    if "scskf" in cfg.modes:
        sub = mapper.build_submaps(ms, cfg.submaps, cam)
    out = {}
    for mode in cfg.modes:
        bundle = sub if mode == "scskf" else (None if mode == "nomap" else full)
        lc = loc.LocalizerConfig(mode=mode, sigma_inflated=cfg.sigma_inflated, inject_rate=cfg.inject_rate)
        out[mode] = loc.Localizer(bundle, cam, cfg.noise, lc, seed=seed).run(session)
    return out


def summarize_run(res: loc.RunResult):
    mt = res.map_phase_times()
    bs = [r.backsolve_s for r in res.records if r.map_rows > 0 and r.backsolve_s > 0]
    return {"rmse_m": res.rmse(), "nees_mean": float(res.nees().mean()),
            "map_phase_median_s": float(np.median(mt)) if len(mt) else 0.0,
            "backsolve_median_s": float(np.median(bs)) if bs else 0.0,
            "map_updates": int(len(mt)), "nnz": {str(k): int(v) for k, v in res.map_nnz.items()},
            "belief_bytes": int(res.belief_bytes),
            "events": [r.event for r in res.records if r.event]}


def _seed_job(args):
    cfg, seed = args
    return seed, run_seed(cfg, seed)


@dataclass
class ExperimentReport:
    config: dict
    runs: list                      # [{"seed", "mode", ...summary}]
    results: dict = field(default_factory=dict, repr=False)   # (seed, mode) -> RunResult

    def by_mode(self, mode, key):
        return np.array([r[key] for r in self.runs if r["mode"] == mode])

    def aggregate(self):
        out = {}
        for mode in dict.fromkeys(r["mode"] for r in self.runs):
            rm = self.by_mode(mode, "rmse_m")
            ne = self.by_mode(mode, "nees_mean")
            out[mode] = {"runs": int(len(rm)), "rmse_median_m": float(np.median(rm)),
                         "nees_average": float(ne.mean()),
                         "map_phase_median_s": float(np.median(self.by_mode(mode, "map_phase_median_s")))}
        return out


def run_experiment(cfg: ExperimentConfig, workers=None):
    """Run all seeds (in a bounded process pool) and reduce the results."""
    cfg.validate()
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, int(s)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            done = list(pool.map(_seed_job, jobs))
    else:
        done = [_seed_job(j) for j in jobs]
    runs, results = [], {}
    for seed, per_mode in sorted(done, key=lambda x: x[0]):
        for mode in cfg.modes:
            res = per_mode[mode]
            results[(seed, mode)] = res
            runs.append({"seed": seed, "mode": mode, **summarize_run(res)})
    conf = asdict(cfg)
    conf["noise"] = asdict(cfg.noise)
    report = ExperimentReport(conf, runs, results)
    if cfg.out_dir:
        write_report(report, cfg.out_dir)
    return report


def write_report(report: ExperimentReport, out_dir):
    """``summary.json``, ``runs.csv`` and per-run frame and NEES series.

    Wall-clock measurements go to ``timings.csv`` only, so every other file
    is byte-identical across repeated runs of the same configuration.
    """
    os.makedirs(out_dir, exist_ok=True)
    timing_keys = ("map_phase_median_s", "backsolve_median_s")
    summary = {"version": REPORT_VERSION, "config": report.config,
               "modes": {m: {k: v for k, v in a.items() if k not in timing_keys}
                         for m, a in report.aggregate().items()},
               "runs": [{k: v for k, v in r.items() if k not in timing_keys} for r in report.runs]}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "rmse_m", "nees_mean", "map_updates", "belief_bytes"])
        for r in report.runs:
            w.writerow([r["seed"], r["mode"], repr(r["rmse_m"]), repr(r["nees_mean"]), r["map_updates"],
                        r["belief_bytes"]])
    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "t", "propagate_ms", "local_ms", "map_ms", "backsolve_ms", "map_rows"])
        for (seed, mode), res in sorted(report.results.items()):
            for r in res.records:
                w.writerow([seed, mode, repr(r.t), f"{1e3 * r.t_propagate:.4f}", f"{1e3 * r.t_local:.4f}",
                            f"{1e3 * r.t_map:.4f}", f"{1e3 * r.backsolve_s:.4f}", r.map_rows])
    for (seed, mode), res in sorted(report.results.items()):
        write_frames_csv(res, os.path.join(out_dir, f"frames_{mode}_{seed}.csv"))


def write_frames_csv(res: loc.RunResult, path):
    """Per-frame error, 3-sigma bounds and NEES (plot data)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "px", "py", "pz", "ex", "ey", "ez", "sx3", "sy3", "sz3", "nees", "submap", "map_rows",
                    "local_tracks", "frame", "event"])
        for r in res.records:
            e = r.p_true - r.p_eval
            w.writerow([repr(r.t), *(repr(float(x)) for x in r.p_eval), *(repr(float(x)) for x in e),
                        *(repr(float(3 * s)) for s in r.pos_sigma), repr(float(r.nees)), r.submap, r.map_rows,
                        r.local_tracks, r.eval_frame, r.event])


# ---------------------------------------------------------------- synthetic maps

def map_at_truth(session, world, cam=None, min_parallax=None):
    """Sub-map whose Hessian is linearized at the true poses and features.

    Used for the memory and back-solve series, where only the structure and
    magnitude of the information matrix matter.
    """
    cam = cam or CameraModel()
    prob = mapper.make_problem(session, np.arange(len(session.frames)), cam, min_parallax=min_parallax)
    ids = prob.feature_ids
    index = {int(f): k for k, f in enumerate(world.ids)}
    pts = world.points[[index[int(f)] for f in ids]]
    Ca = np.array([quat_to_rot(session.q[a]) for a in prob.anchor])
    f = np.einsum("nij,nj->ni", Ca, pts - session.p[prob.anchor])
    est = mapper.MapEstimate(session.q.copy(), session.p.copy(), ids.copy(), prob.anchor.copy(), f,
                             np.arange(len(session.q)))
    H, _, _ = mapper.normal_equations(prob, est)
    G = sparse.cholesky(H)
    return mapper.submap_from_estimate(est, prob, G, session)


def corridor_map(target_dim, seed=0, cam=None):
    """Corridor map whose error-state dimension is close to ``target_dim``."""
    noise = sim.NoiseConfig()
    length = max(2.0, target_dim / 66.0)
    for _ in range(2):
        world = sim.make_corridor_world(length, seed=seed)
        ms = sim.corridor_mapping_session(world, length, noise, seed=seed + 1, cam=cam)
        sm = map_at_truth(ms, world, cam)
        if abs(sm.dim - target_dim) <= 0.05 * target_dim:
            break
        length *= target_dim / sm.dim
    return sm


def room_map(duration, n_features, seed=0, cam=None):
    """Revisit-heavy room map; co-visibility (and fill-in) grows with size."""
    world = sim.make_room_world(n_features=n_features, seed=seed, map_fraction=1.0)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=duration, variant=0), world, sim.NoiseConfig(),
                                      seed=seed + 1, cam=cam)
    return map_at_truth(ms, world, cam)


def memory_report(bundle_or_submaps):
    """Sparse factor storage against a hypothetical dense map covariance."""
    subs = bundle_or_submaps.submaps if hasattr(bundle_or_submaps, "submaps") else list(bundle_or_submaps)
    rows = []
    for i, s in enumerate(subs):
        G = s.factor if hasattr(s, "factor") else s
        dense = 8 * G.dim * G.dim
        rows.append({"submap": i, "dim": int(G.dim), "nnz": int(G.nnz), "factor_bytes": int(G.nbytes),
                     "dense_bytes": int(dense), "ratio": G.nbytes / dense if dense else 0.0})
    return rows


def loglog_slope(x, y):
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def memory_series(dims=(500, 1000, 2000, 4000), seed=0):
    rows = []
    for d in dims:
        sm = corridor_map(d, seed)
        r = memory_report([sm])[0]
        r["target_dim"] = int(d)
        rows.append(r)
    slope = loglog_slope([r["dim"] for r in rows], [r["nnz"] for r in rows])
    return rows, slope


def single_feature_rows(submap, j, rng):
    """Random 2-row map Jacobian of one feature (anchor pose + feature)."""
    H = np.zeros((2, submap.dim))
    o = submap.pose_offset(int(submap.anchor[j]))
    H[:, o:o + 6] = rng.standard_normal((2, 6))
    o = submap.feature_offset(j)
    H[:, o:o + 3] = rng.standard_normal((2, 3))
    return H


def backsolve_benchmark(submaps, reps=100, seed=0, warmup=5):
    """Median single-feature back-solve time per map."""
    rng = np.random.default_rng(seed)
    rows = []
    for s in submaps:
        js = rng.integers(0, s.n_features, size=reps + warmup)
        Hs = [single_feature_rows(s, int(j), rng) for j in js]
        for H in Hs[:warmup]:
            flt.back_solve_J(s.factor, H)
        times = np.empty(reps)
        for k, H in enumerate(Hs[warmup:]):
            t0 = time.perf_counter()
            flt.back_solve_J(s.factor, H)
            times[k] = time.perf_counter() - t0
        rows.append({"dim": int(s.dim), "features": int(s.n_features), "nnz": int(s.factor.nnz),
                     "median_s": float(np.median(times)), "reps": int(reps)})
    return rows


def backsolve_series(durations=(5.0, 10.0, 20.0), features_per_second=20, reps=100, seed=0):
    subs = [room_map(d, int(features_per_second * d), seed) for d in durations]
    rows = backsolve_benchmark(subs, reps, seed)
    return rows, loglog_slope([r["dim"] for r in rows], [r["median_s"] for r in rows])


# ---------------------------------------------------------------- constrained sub-map check

def desk_session(seed, n_poses=40, n_features=80):
    """Small mapping session for the constrained sub-map checks."""
    room = (-2.0, 2.0, -1.5, 1.5, 0.0, 2.0)
    world = sim.make_room_world(room=room, n_features=n_features, seed=seed, map_fraction=1.0, radius=(4.0, 6.0))
    spec = sim.TrajectorySpec(room=room, duration=(n_poses - 1) / 10.0, variant=seed % 4, revisit_count=1)
    return world, sim.generate_mapping_session(spec, world, sim.NoiseConfig(), seed=seed + 1)


def kkt_gap(H1, H2, A1, A2, B, mutate=False):
    """Relaxed-minus-constrained covariance and the matrix ``A^T X A``.

    Returns ``(P_bar - P, M, P_bar)``. ``mutate`` negates the first
    sub-map's constraint Jacobian in the constraint rows only (a sign error
    that a consistent derivation would not make); the gap must then fail the
    check. Negating it everywhere would be a symmetry of the KKT system.
    """
    H1 = H1.toarray() if hasattr(H1, "toarray") else np.asarray(H1)
    H2 = H2.toarray() if hasattr(H2, "toarray") else np.asarray(H2)
    n1, n2 = H1.shape[0], H2.shape[0]
    Hi = np.zeros((n1 + n2, n1 + n2))
    Hi[:n1, :n1] = np.linalg.inv(H1)
    Hi[n1:, n1:] = np.linalg.inv(H2)
    P_bar = 0.5 * (Hi + Hi.T)
    k = 0 if B is None else B.shape[0]
    if k == 0:
        K = np.zeros((n1 + n2, n1 + n2))
        K[:n1, :n1] = H1
        K[n1:, n1:] = H2
        P = np.linalg.inv(K)
        return P_bar - 0.5 * (P + P.T), np.zeros((n1 + n2, n1 + n2)), P_bar
    K = mapper.kkt_matrix(H1, H2, A1, A2, B)
    if mutate:
        K[n1 + n2:n1 + n2 + k, :n1] *= -1.0
    P = np.linalg.inv(K)[:n1 + n2, :n1 + n2]
    A = np.hstack([A1.toarray() if hasattr(A1, "toarray") else A1, A2.toarray() if hasattr(A2, "toarray") else A2])
    Theta = A @ P_bar @ A.T
    Ti = np.linalg.inv(Theta)
    TiB = Ti @ B
    X = Ti - TiB @ np.linalg.solve(B.T @ TiB, TiB.T)
    M = A.T @ X @ A
    return P_bar - P, 0.5 * (M + M.T), P_bar


def min_eig(M):
    if M.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def psd_check(M, tol):
    """Symmetric within ``tol`` and no eigenvalue below ``-tol``."""
    if M.size == 0:
        return True
    return float(np.abs(M - M.T).max()) <= tol and min_eig(M) >= -tol


def verify_kkt(n_problems=50, seed=0, tol=1e-8, mutate=False, max_tries=4):
    """Constrained-versus-relaxed covariance check on random two-sub-map
    problems solved with the constrained mapper."""
    out = []
    s = seed
    while len(out) < n_problems:
        res = None
        for _ in range(max_tries):
            _, ms = desk_session(s)
            s += 1
            try:
                part = mapper.partition_submaps(ms, 2)
                res = mapper.solve_cm_constrained(part, ms)
            except Exception as exc:     # degenerate draw; try the next seed
                log.debug("constrained problem %d skipped: %s", s - 1, exc)
                res = None
                continue
            if res.xtau is not None:
                break
        if res is None or res.xtau is None:
            raise RuntimeError("could not draw a constrained problem")
        H1, H2 = (h.to_csc() for h in res.hessians)
        _, A1, A2, B = mapper.constraint_system(res.estimates[0], res.estimates[1], res.xtau, res.common)
        gap, M, P_bar = kkt_gap(H1, H2, A1, A2, B, mutate)
        scale = max(1.0, float(np.abs(M).max()))
        out.append({"seed": s - 1, "poses": int(res.estimates[0].n_poses + res.estimates[1].n_poses),
                    "features": int(len(np.union1d(res.estimates[0].feature_ids, res.estimates[1].feature_ids))),
                    "constraints": int(B.shape[0]), "gap_min_eig": min_eig(gap), "M_min_eig": min_eig(M),
                    "M_scale": scale,
                    "gap_ok": psd_check(gap, tol), "M_ok": psd_check(M, tol * scale)})
    return out


# ---------------------------------------------------------------- oracle equivalence

def _random_spd_sparse(dim, rng, band=6, extra=2):
    """Banded SPD matrix plus a few long-range couplings."""
    rows, cols, vals = [], [], []
    for i in range(dim):
        for j in range(i, min(dim, i + band)):
            rows.append(i)
            cols.append(j)
            vals.append(rng.standard_normal())
    for _ in range(extra * dim // 10):
        i, j = sorted(rng.integers(0, dim, 2))
        rows.append(i)
        cols.append(j)
        vals.append(rng.standard_normal())
    Jm = sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))
    return (Jm.T @ Jm + sp.identity(dim) * 0.5).tocsc()


def _random_device(rng, n_clones):
    q = quat_normalize(rng.standard_normal(4))
    st = flt.DeviceState(q, rng.standard_normal(3), 0.01 * rng.standard_normal(3), rng.standard_normal(3),
                         0.05 * rng.standard_normal(3), 0.0)
    for _ in range(n_clones):
        st.clones.append(flt.Clone(quat_normalize(rng.standard_normal(4)), rng.standard_normal(3), 0.0, st.next_cid))
        st.next_cid += 1
    return st


def state_vector(st: flt.DeviceState):
    parts = [st.q, st.p, st.bg, st.v, st.ba]
    for c in st.clones:
        parts += [c.q, c.p]
    parts += [st.transforms[s] for s in st.transforms]
    return np.concatenate(parts)


def _random_map_rows(rng, m_feat, dim, d, device_cols):
    H_R = np.zeros((2 * m_feat, d))
    H_R[:, device_cols] = rng.standard_normal((2 * m_feat, len(device_cols)))
    H_M = np.zeros((2 * m_feat, dim))
    for i in range(m_feat):
        cols = rng.choice(dim, size=min(9, dim), replace=False)
        H_M[2 * i:2 * i + 2, cols] = rng.standard_normal((2, len(cols)))
    return H_R, H_M


def oracle_scenario(seed):
    """Random operation sequence applied to a factorized belief and to the
    dense joint oracle; returns the largest covariance and state deviation."""
    rng = np.random.default_rng(seed)
    n_maps = int(rng.integers(1, 3))
    total = int(rng.integers(40, 301))
    dims = [total] if n_maps == 1 else [total // 2, total - total // 2]
    factors = {i: sparse.cholesky(_random_spd_sparse(dm, rng)) for i, dm in enumerate(dims)}
    st = _random_device(rng, int(rng.integers(0, 4)))
    d = st.dim
    A = rng.standard_normal((d, d))
    P0 = 0.01 * (A @ A.T / d + np.eye(d))
    fb = flt.FilterBelief(P0, factors)
    db = flt.DenseJointBelief.from_factorized(fb)
    sf, sd = st, st.copy()
    noise = sim.NoiseConfig()
    worst_P, worst_x = 0.0, 0.0
    sigma = 0.5

    def check():
        nonlocal worst_P, worst_x
        Pj = flt.joint_covariance(fb, list(db.map_dims))
        worst_P = max(worst_P, float(np.abs(Pj - db.P).max()))
        worst_x = max(worst_x, float(np.abs(state_vector(sf) - state_vector(sd)).max()))

    ops = ["init0", "propagate", "clone", "update0", "local"]
    if n_maps == 2:
        ops += ["init1", "update1", "update0", "propagate", "update1"]
    ops += ["clone", "local", "update0"]
    for op in ops:
        if op == "propagate":
            t = sf.t + np.arange(6) * 0.005
            gyro = 0.3 * rng.standard_normal((6, 3))
            acc = np.array([0.0, 0.0, 9.81]) + rng.standard_normal((6, 3))
            flt.propagate(sf, fb, t, gyro, acc, noise)
            flt.propagate(sd, db, t, gyro, acc, noise)
        elif op == "clone":
            flt.clone_and_marginalize(sf, fb, window=3)
            flt.clone_and_marginalize(sd, db, window=3)
        elif op == "local":
            dcur = sf.dim
            H = rng.standard_normal((4, dcur))
            r = 0.1 * rng.standard_normal(4)
            flt.apply_device_update(sf, fb, H, r, sigma)
            flt.apply_device_update(sd, db, H, r, sigma)
        elif op.startswith("init"):
            sid = int(op[-1])
            dcur = sf.dim
            H_R, H_M = _random_map_rows(rng, 4, dims[sid], dcur, np.arange(6))
            H_tau = rng.standard_normal((8, 4))
            r = 0.1 * rng.standard_normal(8)
            tau0 = rng.standard_normal(4)
            flt.initialize_map_transform(sf, fb, sid, tau0, H_R, H_tau, H_M, r, sigma)
            flt.initialize_map_transform(sd, db, sid, tau0, H_R, H_tau, H_M, r, sigma)
        else:
            sid = int(op[-1])
            if sid not in sf.transforms:
                continue
            dcur = sf.dim
            o = sf.tau_offset(sid)
            cols = np.r_[np.arange(6), np.arange(o, o + 4)]
            H_R, H_M = _random_map_rows(rng, int(rng.integers(2, 6)), dims[sid], dcur, cols)
            r = 0.1 * rng.standard_normal(len(H_R))
            b = flt.MeasurementBatch(r, H_R, sigma, H_M, sid)
            if n_maps == 1:
                flt.cskf_map_update(sf, fb, b)
            else:
                flt.scskf_map_update(sf, fb, b)
            flt.dense_map_update(sd, db, b)
        check()
    return worst_P, worst_x


def oracle_equivalence(n_scenarios=100, seed=0):
    return [oracle_scenario(seed + k) for k in range(n_scenarios)]


def skf_vs_ekf_gap(seed):
    """Smallest eigenvalue of ``P_SKF+ - P_EKF+`` for one random update."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 12))
    m_dim = int(rng.integers(2, 20))
    n = d + m_dim
    A = rng.standard_normal((n, n))
    P = A @ A.T / n + 0.1 * np.eye(n)
    k = int(rng.integers(1, 8))
    H = rng.standard_normal((k, n))
    R = np.diag(rng.uniform(0.1, 2.0, k))
    r = rng.standard_normal(k)
    _, P_ekf = flt.dense_ekf_update(np.zeros(n), P, H, r, R)
    _, P_skf = flt.dense_skf_update(np.zeros(n), P, H, r, R, d)
    return min_eig(P_skf - P_ekf)


# ---------------------------------------------------------------- Jacobian checks

def _rel_err(Ja, Jn):
    return float(np.linalg.norm(Ja - Jn) / max(np.linalg.norm(Jn), 1e-12))


def _central_diff(f, x0, eps=1e-6):
    y0 = f(x0)
    J = np.zeros((y0.size, len(x0)))
    for i in range(len(x0)):
        dx = np.zeros(len(x0))
        dx[i] = eps
        J[:, i] = (f(x0 + dx) - f(x0 - dx)) / (2 * eps)
    return J


def _random_view(rng):
    """Device pose and a point roughly 2-6 m in front of it."""
    q = quat_normalize(rng.standard_normal(4))
    p = rng.standard_normal(3)
    C = quat_to_rot(q)
    y = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)])
    return q, p, p + C.T @ y


def check_mapped_jacobians(rng, cam):
    """Relative errors of ``H_R`` and ``H_M`` of a mapped-feature pixel."""
    q, p, g = _random_view(rng)
    T = MapTransform4DoF(rng.uniform(-np.pi, np.pi), rng.standard_normal(3))
    qa = quat_normalize(rng.standard_normal(4))
    pa = rng.standard_normal(3)
    m = T.inverse().apply(g)
    f = quat_to_rot(qa) @ (m - pa)
    _, H_R, H_M = mapped_feature_jacobians(cam, q, p, T, qa, pa, f)

    def h_dev(x):
        qq = quat_multiply(quat_exp(x[0:3]), q)
        TT = MapTransform4DoF(T.yaw + x[6], T.translation + x[7:10])
        return mapped_feature_jacobians(cam, qq, p + x[3:6], TT, qa, pa, f)[0]

    def h_map(x):
        qq = quat_multiply(quat_exp(x[0:3]), qa)
        return mapped_feature_jacobians(cam, q, p, T, qq, pa + x[3:6], f + x[6:9])[0]

    return _rel_err(H_R, _central_diff(h_dev, np.zeros(10))), _rel_err(H_M, _central_diff(h_map, np.zeros(9)))


def check_local_jacobians(rng, cam, n_views=3):
    q, p, pf = _random_view(rng)
    quats, poss = [q], [p]
    for _ in range(n_views - 1):
        quats.append(quat_multiply(quat_exp(0.05 * rng.standard_normal(3)), q))
        poss.append(p + 0.1 * rng.standard_normal(3))
    _, H_poses, H_f, ok = local_feature_jacobians(cam, quats, poss, pf)
    worst = 0.0
    for i in range(n_views):
        def h_pose(x, i=i):
            qs = list(quats)
            ps = list(poss)
            qs[i] = quat_multiply(quat_exp(x[0:3]), quats[i])
            ps[i] = poss[i] + x[3:6]
            return local_feature_jacobians(cam, qs, ps, pf)[0][i]
        worst = max(worst, _rel_err(H_poses[i], _central_diff(h_pose, np.zeros(6))))
    Jf = _central_diff(lambda x: local_feature_jacobians(cam, quats, poss, pf + x)[0].ravel(), np.zeros(3))
    return max(worst, _rel_err(H_f, Jf))


def check_transition(rng, n_samples=21, dt=0.005):
    """Relative error of the integrated error-state transition matrix."""
    noise = sim.NoiseConfig()
    st = flt.DeviceState(quat_normalize(rng.standard_normal(4)), rng.standard_normal(3),
                         0.01 * rng.standard_normal(3), rng.standard_normal(3), 0.1 * rng.standard_normal(3), 0.0)
    t = np.arange(n_samples) * dt
    gyro = 0.5 * rng.standard_normal(3) + 0.2 * rng.standard_normal((n_samples, 3))
    acc = np.array([0.0, 0.0, 9.81]) + rng.standard_normal((n_samples, 3))
    Phi, _ = flt.integrate_imu(st.copy(), t, gyro, acc, noise)
    base = st.copy()
    flt.integrate_imu(base, t, gyro, acc, noise)

    def run(x):
        s = st.copy()
        s.apply_correction(x)
        flt.integrate_imu(s, t, gyro, acc, noise)
        dq = quat_multiply(s.q, np.r_[-base.q[:3], base.q[3]])
        dq = dq if dq[3] >= 0 else -dq
        th = 2 * dq[:3]
        return np.r_[th, s.p - base.p, s.bg - base.bg, s.v - base.v, s.ba - base.ba]

    return _rel_err(Phi, _central_diff(run, np.zeros(15)))


def jacobian_checks(n=100, seed=0):
    rng = np.random.default_rng(seed)
    cam = CameraModel()
    out = {"mapped_device": [], "mapped_map": [], "local": [], "transition": []}
    for _ in range(n):
        a, b = check_mapped_jacobians(rng, cam)
        out["mapped_device"].append(a)
        out["mapped_map"].append(b)
        out["local"].append(check_local_jacobians(rng, cam))
        out["transition"].append(check_transition(rng))
    return {k: np.array(v) for k, v in out.items()}


# ---------------------------------------------------------------- gate calibration

@dataclass
class GateSnapshot:
    state: flt.DeviceState
    belief: flt.FilterBelief
    sid: int
    feature_ids: np.ndarray


def gate_snapshots(seed=0, every=10, cfg: ExperimentConfig | None = None, cam=None):
    """Mid-run filter states of a single-map run, one per ``every`` frames
    with a regular map update."""
    cfg = cfg or ExperimentConfig(modes=("cskf",), run_duration=15.0)
    cam = cam or CameraModel()
    _, ms, session = build_world(cfg, seed)
    bls, prob = mapper.build_map_bls(ms, cam)
    bundle = mapper.bundle_from_bls(bls, prob, ms)
    L = loc.Localizer(bundle, cam, cfg.noise, loc.LocalizerConfig(mode="cskf"), seed=seed)
    snaps = []
    count = [0]
    frames = {round(fr.t, 9): fr for fr in session.frames}

    def grab(rec):
        count[0] += 1
        if rec.map_rows == 0 or rec.event or count[0] % every:
            return
        fr = frames[round(rec.t, 9)]
        sm = bundle.submaps[rec.submap]
        ids = np.array([f for f in fr.ids if sm.feature_index(int(f)) >= 0], dtype=np.int64)
        snaps.append(GateSnapshot(L.state.copy(), L.belief.copy(), rec.submap, ids))

    L.run(session, progress=grab)
    return bundle, snaps


def _perturbed_submap(sm, e_M):
    est = mapper.MapEstimate(sm.pose_q, sm.pose_p, sm.feature_ids, sm.anchor, sm.f_anchor,
                             np.arange(sm.n_poses)).retract(e_M)
    return est


def gate_calibration(n_features=10000, seed=0, outlier_fraction=0.2, min_sigma=5.0, cam=None):
    """Acceptance of correctly associated features and rejection of
    displaced ones when the errors are drawn from the filter's own belief.

    For each draw the joint (device, map) error is sampled from the factored
    covariance, pixels are simulated through the nonlinear model with noise,
    and the per-feature test runs at the estimate. A fraction of the
    features is then displaced by more than ``min_sigma`` innovation
    standard deviations and gated again.
    """
    cam = cam or CameraModel()
    rng = np.random.default_rng(seed)
    inl_acc = inl_tot = out_rej = out_tot = 0
    s = seed
    while inl_tot < n_features:
        bundle, snaps = gate_snapshots(s)
        s += 1
        for snap in snaps:
            if inl_tot >= n_features:
                break
            sm = bundle.submaps[snap.sid]
            G = sm.factor
            gam = snap.belief.gamma(snap.sid, snap.state.dim)
            P = snap.belief.P
            Lc = np.linalg.cholesky(P - gam @ gam.T + 1e-15 * np.eye(len(P)))
            for _ in range(10):
                xi = rng.standard_normal(G.dim)
                e_M = sparse.forward_solve(G, xi)
                e_R = gam @ xi + Lc @ rng.standard_normal(len(P))
                true_state = snap.state.copy()
                true_state.apply_correction(e_R)
                true_map = _perturbed_submap(sm, e_M)
                T = MapTransform4DoF(float(true_state.transforms[snap.sid][0]), true_state.transforms[snap.sid][1:4])
                uv, items = [], []
                for fid in snap.feature_ids:
                    j = sm.feature_index(int(fid))
                    a = true_map.anchor[j]
                    try:
                        z, _, _ = mapped_feature_jacobians(cam, true_state.q, true_state.p, T, true_map.q[a],
                                                           true_map.p[a], true_map.f[j])
                    except Exception:
                        continue
                    items.append(matcher.Correspondence(len(uv), int(fid), snap.sid))
                    uv.append(z + cam.sigma * rng.standard_normal(2))
                if len(items) < matcher.MIN_CORRESPONDENCES:
                    continue
                frame = sim.Frame(0.0, 0, np.array([c.feature_id for c in items]), np.array(uv),
                                  np.zeros(len(items), dtype=bool))
                corr = matcher.CorrespondenceSet(items)
                batch, _, kept = matcher.build_map_batch(cam, snap.state, sm, snap.sid, frame, corr, cam.sigma)
                if batch is None:
                    continue
                d2, J = matcher.mahalanobis_per_feature(snap.belief, batch)
                thr = chi2.ppf(matcher.GATE_PROB, 2)
                inl_acc += int(np.sum(d2 <= thr))
                inl_tot += len(d2)
                # displace a subset of the same features and gate again
                _, S, _, _ = flt.map_innovation(snap.belief, batch, J)
                bad = rng.random(len(kept)) < outlier_fraction
                uv2 = frame.uv.copy()
                for i in np.flatnonzero(bad):
                    lam_max = np.linalg.eigvalsh(S[2 * i:2 * i + 2, 2 * i:2 * i + 2]).max()
                    ang = rng.uniform(0, 2 * np.pi)
                    mag = (min_sigma + rng.uniform(0.0, 5.0)) * np.sqrt(lam_max)
                    uv2[kept[i].obs_index] += mag * np.array([np.cos(ang), np.sin(ang)])
                frame2 = sim.Frame(0.0, 0, frame.ids, uv2, bad)
                batch2, _, _ = matcher.build_map_batch(cam, snap.state, sm, snap.sid, frame2, corr, cam.sigma)
                d2b, _ = matcher.mahalanobis_per_feature(snap.belief, batch2, J=J)
                out_rej += int(np.sum(d2b[bad] > thr))
                out_tot += int(bad.sum())
    return {"inlier_acceptance": inl_acc / inl_tot, "inliers": inl_tot,
            "outlier_rejection": out_rej / max(out_tot, 1), "outliers": out_tot}


# ---------------------------------------------------------------- verifier battery

def nees_sampling_check(n=10000, seed=0, dof=3):
    """Average NEES of errors drawn from their own covariance, and with the
    covariance halved."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dof, dof))
    P = A @ A.T + 0.5 * np.eye(dof)
    L = np.linalg.cholesky(P)
    e = rng.standard_normal((n, dof)) @ L.T
    full = nees_series(e, np.repeat(P[None], n, axis=0))["mean"]
    half = nees_series(e, np.repeat(0.5 * P[None], n, axis=0))["mean"]
    return full, half


def verify_suite(quick=False, seed=0):
    """Runs the property battery; returns ``[(name, passed, detail)]``."""
    results = []
    n_or = 20 if quick else 100
    dev = oracle_equivalence(n_or, seed)
    worst = max(max(a, b) for a, b in dev)
    results.append(("oracle_equivalence", worst <= 1e-8, f"{n_or} scenarios, max abs deviation {worst:.2e}"))

    gaps = [skf_vs_ekf_gap(seed + k) for k in range(100)]
    results.append(("schmidt_dominates_ekf", min(gaps) >= -1e-9, f"min eig {min(gaps):.2e}"))

    n_kkt = 10 if quick else 50
    kk = verify_kkt(n_kkt, seed)
    ok = all(r["gap_ok"] and r["M_ok"] for r in kk)
    results.append(("submap_relaxation_psd", ok,
                    f"{n_kkt} problems, min gap eig {min(r['gap_min_eig'] for r in kk):.2e}"))
    mut = verify_kkt(3, seed, mutate=True)
    caught = all(not r["gap_ok"] for r in mut)
    results.append(("submap_relaxation_mutation_detected", caught,
                    f"min gap eig under mutation {max(r['gap_min_eig'] for r in mut):.2e}"))

    jc = jacobian_checks(20 if quick else 100, seed)
    worst = {k: float(v.max()) for k, v in jc.items()}
    results.append(("jacobians_match_finite_differences", max(worst.values()) <= 1e-5,
                    ", ".join(f"{k} {v:.1e}" for k, v in worst.items())))

    full, half = nees_sampling_check(seed=seed)
    lo, hi = nees_interval(3, 10000)
    results.append(("nees_sampling", lo <= full <= hi and abs(half - 2 * full) < 1e-9,
                    f"mean {full:.3f} in [{lo:.3f}, {hi:.3f}], halved {half:.3f}"))
    return results


def kkt_without_constraints(seed=0):
    """Gap norm when the constraint set is empty (must vanish)."""
    _, ms = desk_session(seed)
    part = mapper.partition_submaps(ms, 2)
    cam = CameraModel()
    probs = [mapper.make_problem(ms, np.arange(a, b), cam, feature_ids=fs, min_parallax=mapper.MIN_PARALLAX)
             for (a, b), fs in zip(part.ranges, part.features)]
    Hs = [mapper.normal_equations(p, mapper.solve_bls(p).estimate)[0] for p in probs]
    gap, _, _ = kkt_gap(Hs[0], Hs[1], None, None, None)
    return float(np.abs(gap).max())


__all__ = [
    "ExperimentConfig", "ExperimentReport", "run_experiment", "run_seed", "nees_series", "nees_interval",
    "memory_report", "memory_series", "backsolve_benchmark", "backsolve_series", "verify_suite", "verify_kkt",
    "oracle_equivalence", "jacobian_checks", "gate_calibration", "worker_count",
]
