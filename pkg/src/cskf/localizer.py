"""Per-frame localization pipeline: propagation, window management,
map-based updates (or transform initialization) and local-feature updates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _imu, filter as flt, matcher
from .errors import DegenerateGeometry, SingularCovariance, SingularInnovation, TriangulationFailed
from .geom import CameraModel, quat_exp, quat_multiply, quat_normalize, rot_z
from .mapper import align_4dof

MODES = ("cskf", "scskf", "inflated", "nomap", "oracle")


@dataclass
class LocalizerConfig:
    mode: str = "cskf"
    window: int = flt.WINDOW
    sigma_inflated: float = 7.5
    inject_rate: float = 0.0
    search_radius: float = 30.0
    min_track: int = 3
    min_poseless: int = matcher.MIN_POSELESS
    min_correspondences: int = matcher.MIN_CORRESPONDENCES
    align_inlier_m: float = 0.3
    # one-sigma initial uncertainty
    att0: float = 0.005
    pos0: float = 0.01
    vel0: float = 0.02
    bg0: float = 1e-3
    ba0: float = 1e-2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def initial_covariance(self):
        return np.diag(np.r_[np.full(3, self.att0), np.full(3, self.pos0), np.full(3, self.bg0),
                             np.full(3, self.vel0), np.full(3, self.ba0)] ** 2)


@dataclass
class FrameRecord:
    t: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    p_true: np.ndarray
    pos_sigma: np.ndarray
    nees: float
    t_propagate: float
    t_local: float
    t_map: float
    map_rows: int = 0
    map_updates: int = 0
    local_tracks: int = 0
    submap: int = -1
    backsolve_s: float = 0.0
    event: str = ""
    # position estimate in the evaluation frame (-1: global)
    p_eval: np.ndarray = None
    p_cov: np.ndarray = None
    eval_frame: int = -1


@dataclass
class RunResult:
    records: list
    mode: str
    map_nnz: dict = field(default_factory=dict)
    belief_bytes: int = 0
    gate_log: list = field(default_factory=list)

    def errors(self):
        return np.array([r.p_eval - r.p_true for r in self.records])

    def rmse(self):
        e = self.errors()
        return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))

    def nees(self):
        return np.array([r.nees for r in self.records])

    def covariances(self):
        return np.array([r.p_cov for r in self.records])

    def map_phase_times(self):
        return np.array([r.t_map for r in self.records if r.map_rows > 0])


def sample_initial_state(truth, k, P0, rng):
    """Truth perturbed by a draw from ``P0`` (15 x 15)."""
    e = rng.multivariate_normal(np.zeros(15), P0)
    q = quat_normalize(quat_multiply(quat_exp(-e[0:3]), truth.q[k]))
    return flt.DeviceState(q, truth.p[k] - e[3:6], truth.bg[k] - e[6:9], truth.v[k] - e[9:12],
                           truth.ba[k] - e[12:15], float(truth.t[k]))


class Localizer:
    """Runs one estimator mode over a localization session."""

    def __init__(self, bundle, cam: CameraModel, noise, config: LocalizerConfig, seed=0):
        self.cfg = config
        self.cam = cam
        self.noise = noise
        self.sigma = cam.sigma
        self.rng = np.random.default_rng(seed)
        self.bundle = None if config.mode == "nomap" else bundle
        if self.bundle is not None and config.mode == "cskf" and len(self.bundle.submaps) != 1:
            raise ValueError("cskf mode expects a single-map bundle")
        self.tracks = {}
        self.eval_ref = None
        self.state = None
        self.belief = None
        self.gate_log = []

    # ------------------------------------------------------------ setup
    def start(self, state: flt.DeviceState, P0):
        self.state = state
        factors = {} if self.bundle is None or self.cfg.mode == "inflated" else \
            {i: s.factor for i, s in enumerate(self.bundle.submaps)}
        belief = flt.FilterBelief(P0.copy(), factors)
        if self.cfg.mode == "oracle":
            belief = flt.DenseJointBelief.from_factorized(belief)
        self.belief = belief

    # ------------------------------------------------------------ main loop
    def run(self, session, state0=None, P0=None, progress=None):
        P0 = self.cfg.initial_covariance() if P0 is None else P0
        truth = session.truth
        if state0 is None:
            state0 = sample_initial_state(truth, 0, P0, self.rng)
        self.start(state0, P0)
        g_mid = _imu.midpoints(session.gyro)
        a_mid = _imu.midpoints(session.accel)
        records = []
        prev = session.frames[0].imu_index
        for fr in session.frames:
            t0 = time.perf_counter()
            i = fr.imu_index
            if i > prev:
                flt.propagate(self.state, self.belief, session.imu_t[prev:i + 1], session.gyro[prev:i + 1],
                              session.accel[prev:i + 1], self.noise, g_mid[prev:i], a_mid[prev:i])
            prev = i
            t1 = time.perf_counter()
            rec = self.process_frame(fr)
            rec.t_propagate = t1 - t0
            self._evaluate(rec, truth.p[i])
            records.append(rec)
            if progress:
                progress(rec)
        nnz = {} if self.bundle is None else {i: s.factor.nnz for i, s in enumerate(self.bundle.submaps)}
        return RunResult(records, self.cfg.mode, nnz, self.belief_bytes(), self.gate_log)

    def _evaluate(self, rec, p_true):
        """Position error and NEES in the true frame of the sub-map used by
        the latest map update (the global frame before any, and without a
        map)."""
        st = self.state
        P = flt._device_P(self.belief)
        if rec.submap >= 0 and np.all(np.isfinite(self.bundle.submaps[rec.submap].truth_transform)):
            self.eval_ref = rec.submap
        if self.eval_ref is None:
            p_hat, p_ref, Jp = st.p, p_true, np.zeros((3, st.dim))
            Jp[:, 3:6] = np.eye(3)
        else:
            sid = self.eval_ref
            tau = st.transforms[sid]
            tt = self.bundle.submaps[sid].truth_transform
            Rt = rot_z(-tau[0])
            p_hat = Rt @ (st.p - tau[1:4])
            p_ref = rot_z(-tt[0]) @ (p_true - tt[1:4])
            o = st.tau_offset(sid)
            Jp = np.zeros((3, st.dim))
            Jp[:, 3:6] = Rt
            Jp[:, o] = -Rt @ np.cross([0.0, 0.0, 1.0], st.p - tau[1:4])
            Jp[:, o + 1:o + 4] = -Rt
        Pp = Jp @ P @ Jp.T
        e = p_ref - p_hat
        rec.p_eval, rec.p_true, rec.p_cov = p_hat, p_ref, Pp
        rec.pos_sigma = np.sqrt(np.diag(Pp))
        try:
            rec.nees = float(e @ np.linalg.solve(Pp, e))
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("position covariance is singular") from exc
        rec.eval_frame = -1 if self.eval_ref is None else self.eval_ref

    def belief_bytes(self):
        b = self.belief
        if isinstance(b, flt.DenseJointBelief):
            return b.P.nbytes
        return b.P.nbytes + sum(g.nbytes for g in b.gammas.values()) + sum(G.nbytes for G in b.factors.values())

    def process_frame(self, fr):
        st = self.state
        flt.clone_and_marginalize(st, self.belief, window=10 ** 9)
        cid = st.clones[-1].cid
        rec = FrameRecord(fr.t, None, None, None, None, None, 0.0, 0.0, 0.0, 0.0)

        t0 = time.perf_counter()
        consumed = set()
        if self.bundle is not None:
            consumed = self._map_step(fr, rec)
        t1 = time.perf_counter()
        rec.t_map = t1 - t0

        seen = set()
        for k, (fid, uv) in enumerate(zip(fr.ids, fr.uv)):
            if k in consumed:
                continue
            fid = int(fid)
            seen.add(fid)
            self.tracks.setdefault(fid, []).append((cid, uv.copy()))
        finished = [f for f in self.tracks if f not in seen]
        if st.n_clones > self.cfg.window:
            oldest = st.clones[0].cid
            finished += [f for f, tr in self.tracks.items() if f in seen and tr[0][0] == oldest]
        ready = []
        for f in finished:
            tr = self.tracks.pop(f)
            if len(tr) >= self.cfg.min_track:
                ready.append(tr)
        if ready:
            _, _, n_used = flt.local_feature_update(st, self.belief, ready, self.cam, self.sigma)
            rec.local_tracks = n_used
        while st.n_clones > self.cfg.window:
            oldest = st.clones[0].cid
            for f in list(self.tracks):
                self.tracks[f] = [o for o in self.tracks[f] if o[0] != oldest]
                if not self.tracks[f]:
                    del self.tracks[f]
            flt.marginalize_clone(st, self.belief, 0)
        rec.t_local = time.perf_counter() - t1
        rec.p, rec.q, rec.v = st.p.copy(), st.q.copy(), st.v.copy()
        return rec

    # ------------------------------------------------------------ map handling
    def _map_step(self, fr, rec):
        """Map-based updates of one frame.

        Correspondences of all initialized sub-maps form one set: each is
        gated per feature, and the set is used only if at least
        ``min_correspondences`` distinct observations survive. Sub-maps are
        then applied one after another, largest first, each observation
        at most once.
        """
        st = self.state
        for sid, sm in enumerate(self.bundle.submaps):
            if sid in st.transforms:
                continue
            if int(np.isin(fr.ids, sm.feature_ids).sum()) >= self.cfg.min_poseless:
                used = self._try_initialize(fr, sid, sm, rec)
                if used:
                    return used
        found = []
        for sid, sm in enumerate(self.bundle.submaps):
            if sid in st.transforms:
                got = self._gated_batch(fr, sid, sm, set(), min_count=1)
                if got is not None:
                    found.append(got)
        survivors = set()
        for g in found:
            survivors |= {c.obs_index for c in g[1]}
        if len(survivors) < self.cfg.min_correspondences:
            return set()
        found.sort(key=lambda g: -len(g[1]))
        consumed = set()
        for k, got in enumerate(found):
            if k > 0:
                # later sub-maps see the updated state and only the
                # observations no earlier update has used
                got = self._gated_batch(fr, got[3], self.bundle.submaps[got[3]], consumed, min_count=1, log=False)
                if got is None:
                    continue
            gated, kept, Jg, sid, bs = got
            try:
                if self.cfg.mode == "inflated":
                    flt.inflated_noise_update(st, self.belief, gated, self.cfg.sigma_inflated)
                elif isinstance(self.belief, flt.DenseJointBelief):
                    flt.dense_map_update(st, self.belief, gated)
                else:
                    flt.scskf_map_update(st, self.belief, gated, Jg)
            except SingularInnovation:
                continue
            if rec.submap < 0:
                rec.submap = sid
            rec.map_rows += len(gated.r)
            rec.map_updates += 1
            rec.backsolve_s += bs
            consumed |= {c.obs_index for c in kept}
        return consumed

    def _gated_batch(self, fr, sid, sm, exclude, min_count=None, log=True):
        """Matched, linearized and gated batch of one sub-map, or None."""
        st = self.state
        tau = st.transforms[sid]
        p_m, C_m = matcher.device_in_map(st, tau)
        poses = matcher.candidate_images_pose_assisted(p_m, C_m, sm)
        if not poses:
            return None
        ids = sorted(matcher.candidate_features(sm, poses))
        pred = dict(zip(ids, matcher.predict_pixels(self.cam, st, tau, sm, ids)))
        corr = matcher.match_features(fr, sid, ids, pred, self.cfg.search_radius, self.cfg.inject_rate, self.rng)
        if exclude:
            corr = matcher.CorrespondenceSet([c for c in corr.items if c.obs_index not in exclude],
                                             corr.pipeline_mode)
        min_count = self.cfg.min_correspondences if min_count is None else min_count
        if len(corr) < min_count:
            return None
        batch, _, items = matcher.build_map_batch(self.cam, st, sm, sid, fr, corr, self.sigma)
        if batch is None:
            return None
        exact = self.cfg.mode == "inflated"
        if exact:
            batch = flt.MeasurementBatch(batch.r, batch.H_R, self.cfg.sigma_inflated, batch.H_M, sid)
        tb = time.perf_counter()
        J = None
        if not exact and not isinstance(self.belief, flt.DenseJointBelief):
            J = flt.back_solve_J(sm.factor, batch.H_M)
        bs = time.perf_counter() - tb
        gated, kept, Jg, d2 = matcher.gate(batch, items, self.belief, exact, min_count=min_count, J=J)
        if log:
            self.gate_log.append((d2, np.array([c.injected for c in items])))
        if gated is None:
            return None
        return gated, kept, Jg, sid, bs

    def _try_initialize(self, fr, sid, sm, rec):
        st = self.state
        corr = matcher.match_features(fr, sid, sm.feature_ids, None, inject_rate=self.cfg.inject_rate,
                                      rng=self.rng, mode="pose_less")
        if len(corr) < self.cfg.min_poseless:
            return set()
        cid = st.clones[-1].cid
        pos_map = sm.feature_positions()
        g_pts, m_pts, items = [], [], []
        for c in corr.items:
            tr = self.tracks.get(int(fr.ids[c.obs_index]))
            if tr is None or len(tr) < 2:
                continue
            track = tr + [(cid, fr.uv[c.obs_index])]
            idx = [st.clone_index(k) for k, _ in track]
            try:
                pf = flt.triangulate(self.cam, [st.clones[i].q for i in idx], [st.clones[i].p for i in idx],
                                     np.array([z for _, z in track]), self.sigma)
            except TriangulationFailed:
                continue
            g_pts.append(pf)
            m_pts.append(pos_map[sm.feature_index(c.feature_id)])
            items.append(c)
        if len(items) < self.cfg.min_poseless:
            return set()
        g_pts, m_pts = np.array(g_pts), np.array(m_pts)
        inl = ransac_align(m_pts, g_pts, self.cfg.align_inlier_m, self.rng)
        if inl.sum() < self.cfg.min_poseless:
            return set()
        yaw, t = align_4dof(m_pts[inl], g_pts[inl])
        sel = matcher.CorrespondenceSet([c for c, k in zip(items, inl) if k], "pose_less")
        tau0 = self._refine_transform(fr, sid, sm, sel, np.r_[yaw, t])
        batch, H_tau, kept = matcher.build_map_batch(self.cam, st, sm, sid, fr, sel, self.sigma, tau=tau0)
        if batch is None or len(kept) < 2:
            return set()
        # coarse residual screen before the transform enters the state
        res = np.linalg.norm(batch.r.reshape(-1, 2), axis=1)
        ok = res <= self.cfg.search_radius
        if ok.sum() < self.cfg.min_poseless:
            return set()
        rows = np.repeat(ok, 2)
        kept = [c for c, k in zip(kept, ok) if k]
        sigma = self.sigma
        J = None
        if self.cfg.mode == "inflated":
            sigma = self.cfg.sigma_inflated
            J = np.zeros((int(rows.sum()), 0))
        try:
            if self.cfg.mode == "inflated":
                _init_without_map(st, self.belief, sid, tau0, batch.H_R[rows], H_tau[rows], batch.r[rows], sigma)
            else:
                flt.initialize_map_transform(st, self.belief, sid, tau0, batch.H_R[rows], H_tau[rows],
                                             batch.H_M[rows], batch.r[rows], sigma, J)
        except (DegenerateGeometry, SingularInnovation):
            return set()
        rec.event = f"init{sid}"
        rec.map_rows = int(rows.sum())
        rec.map_updates = 1
        rec.submap = sid
        return {c.obs_index for c in kept}

    def _refine_transform(self, fr, sid, sm, sel, tau, iters=5):
        """Gauss-Newton on the reprojection error over the transform alone,
        so the initializing update is linearized close to its solution."""
        for _ in range(iters):
            batch, H_tau, kept = matcher.build_map_batch(self.cam, self.state, sm, sid, fr, sel, self.sigma, tau=tau)
            if batch is None or len(kept) < 2:
                break
            ok = np.repeat(np.linalg.norm(batch.r.reshape(-1, 2), axis=1) <= self.cfg.search_radius, 2)
            if ok.sum() < 4:
                break
            step, *_ = np.linalg.lstsq(H_tau[ok], batch.r[ok], rcond=None)
            tau = tau + step
            if np.abs(step).max() < 1e-9:
                break
        return tau


def _init_without_map(state, belief, sid, tau0, H_R, H_tau, r, sigma):
    """Transform initialization treating the map as exact (no cross factor)."""
    factors = belief.factors
    belief.factors = {sid: None}
    try:
        flt.initialize_map_transform(state, belief, sid, tau0, H_R, H_tau, np.zeros((len(r), 0)), r, sigma,
                                     J=np.zeros((len(r), 0)))
    finally:
        belief.factors = factors
        belief.gammas.pop(sid, None)


def ransac_align(src, dst, thresh, rng, iters=50):
    """Inlier mask of the best two-point yaw+translation hypothesis."""
    n = len(src)
    best = np.zeros(n, dtype=bool)
    if n < 2:
        return best
    for _ in range(iters):
        i, j = rng.choice(n, 2, replace=False)
        if np.linalg.norm(src[i, :2] - src[j, :2]) < 0.2:
            continue
        yaw, t = align_4dof(src[[i, j]], dst[[i, j]])
        err = np.linalg.norm(dst - (src @ rot_z(yaw).T + t), axis=1)
        inl = err < thresh
        if inl.sum() > best.sum():
            best = inl
    return best
