"""Offline mapping: batch least squares, sub-map partitioning, the
constrained cooperative-mapping (CM) solve and map bundle export.

Error-state layout of a (sub-)map: ``n`` poses first, six entries each
(``[dtheta, dp]``, rotation as a left perturbation of the map-to-pose
rotation), then ``m`` features, three entries each (position in the anchor
pose frame).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import sparse
from ._kernels import crc64
from .amd import amd_order
from .errors import (BehindCamera, ChecksumMismatch, ConstraintInfeasible, FormatError, NotConverged, NotPositiveDefinite,
                     RankDeficient, TooFewPoses, VersionMismatch)
from .geom import (CameraModel, quat_exp, quat_multiply, quat_normalize, quat_to_rot, rot_to_quat, rot_z, skew,
                   so3_log, so3_right_jacobian_inv, yaw_jacobian, yaw_of)

log = logging.getLogger(__name__)

GAUGE_INFO = 1e6
# features whose viewing rays span less than this are left out of the map
MIN_PARALLAX = np.deg2rad(2.0)


def batch_rot(q):
    q = np.asarray(q)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def batch_skew(v):
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


@dataclass
class MapEstimate:
    """Poses and anchored features of one (sub-)map."""

    q: np.ndarray               # (n, 4) map-to-pose rotations
    p: np.ndarray               # (n, 3) pose positions in the map frame
    feature_ids: np.ndarray     # (m,)
    anchor: np.ndarray          # (m,) local anchor pose index
    f: np.ndarray               # (m, 3) feature in the anchor frame
    pose_ids: np.ndarray        # (n,) keyframe indices in the mapping session

    @property
    def n_poses(self):
        return len(self.q)

    @property
    def n_features(self):
        return len(self.feature_ids)

    @property
    def dim(self):
        return 6 * self.n_poses + 3 * self.n_features

    def feature_offset(self, j):
        return 6 * self.n_poses + 3 * j

    def feature_positions(self):
        """Features in the map frame."""
        Ca = batch_rot(self.q[self.anchor])
        return self.p[self.anchor] + np.einsum("nji,nj->ni", Ca, self.f)

    def retract(self, dx):
        n = self.n_poses
        d = dx[:6 * n].reshape(n, 6)
        q = np.array([quat_normalize(quat_multiply(quat_exp(d[i, :3]), self.q[i])) for i in range(n)])
        p = self.p + d[:, 3:]
        f = self.f + dx[6 * n:].reshape(-1, 3)
        return MapEstimate(q, p, self.feature_ids, self.anchor, f, self.pose_ids)

    def copy(self):
        return MapEstimate(self.q.copy(), self.p.copy(), self.feature_ids.copy(), self.anchor.copy(),
                           self.f.copy(), self.pose_ids.copy())


@dataclass
class MapProblem:
    """Measurements of one (sub-)map cost: the poses ``pose_ids`` of a
    mapping session and the features kept for them."""

    session: object
    pose_ids: np.ndarray
    feature_ids: np.ndarray
    obs_pose: np.ndarray        # local pose index per observation
    obs_feat: np.ndarray        # local feature index per observation
    obs_uv: np.ndarray
    anchor: np.ndarray
    cam: CameraModel
    pixel_sigma: float

    @property
    def n_poses(self):
        return len(self.pose_ids)


def make_problem(session, pose_ids, cam, feature_ids=None, min_obs=2, min_parallax=None):
    """Collect the observations of ``pose_ids``; keep features seen at
    least ``min_obs`` times (optionally restricted to ``feature_ids``)."""
    pose_ids = np.asarray(pose_ids, dtype=np.int64)
    if len(pose_ids) < 2:
        raise TooFewPoses(f"need at least 2 poses, got {len(pose_ids)}")
    rows = []
    for li, k in enumerate(pose_ids):
        fr = session.frames[k]
        good = ~fr.is_outlier
        for fid, uv in zip(fr.ids[good], fr.uv[good]):
            rows.append((li, int(fid), uv[0], uv[1]))
    if not rows:
        raise RankDeficient("no observations")
    arr = np.array(rows)
    pose_l = arr[:, 0].astype(np.int64)
    fids = arr[:, 1].astype(np.int64)
    uv = arr[:, 2:4]
    uniq, counts = np.unique(fids, return_counts=True)
    keep_ids = uniq[counts >= min_obs]
    if feature_ids is not None:
        keep_ids = np.intersect1d(keep_ids, feature_ids)
    sel = np.isin(fids, keep_ids)
    pose_l, fids, uv = pose_l[sel], fids[sel], uv[sel]
    feat_l = np.searchsorted(keep_ids, fids)
    order = np.lexsort((pose_l, feat_l))
    pose_l, feat_l, uv = pose_l[order], feat_l[order], uv[order]
    anchor = np.full(len(keep_ids), -1, dtype=np.int64)
    for pl, fl in zip(pose_l, feat_l):
        if anchor[fl] < 0 or pl < anchor[fl]:
            anchor[fl] = pl
    sigma = session.noise.pixel_sigma if session.noise.pixel_sigma > 0 else 1.0
    problem = MapProblem(session, pose_ids, keep_ids, pose_l, feat_l, uv, anchor, cam, sigma)
    if min_parallax:
        problem = prune_weak_features(problem, min_parallax)
    return problem


def _frame_from_tilt(tilt):
    """Global-to-body rotation with the measured gravity direction and zero yaw."""
    t = tilt / np.linalg.norm(tilt)
    r1 = np.cross(t, [1.0, 0.0, 0.0])
    if np.linalg.norm(r1) < 1e-6:
        r1 = np.cross(t, [0.0, 1.0, 0.0])
    r1 /= np.linalg.norm(r1)
    r0 = np.cross(r1, t)
    if r0[0] < 0:
        r1, r0 = -r1, -r0
    R_wb = np.vstack([r0, r1, t])
    return R_wb.T


def initial_guess(problem: MapProblem):
    """Dead reckoning from the motion constraints, then linear triangulation."""
    s = problem.session
    ids = problem.pose_ids
    n = len(ids)
    Cs = [_frame_from_tilt(s.tilt[ids[0]])]
    ps = [np.zeros(3)]
    for k in range(n - 1):
        a = ids[k]
        C = Cs[-1]
        # constraints chain only between consecutive session keyframes
        Cs.append(s.odom_rot[a] @ C)
        ps.append(ps[-1] + C.T @ s.odom_pos[a])
    q = np.array([rot_to_quat(C) for C in Cs])
    p = np.array(ps)
    cam = problem.cam
    m = len(problem.feature_ids)
    f = np.zeros((m, 3))
    starts = np.searchsorted(problem.obs_feat, np.arange(m + 1))
    for j in range(m):
        rows = []
        for o in range(starts[j], starts[j + 1]):
            i = problem.obs_pose[o]
            u, v = problem.obs_uv[o]
            x = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            C = Cs[i]
            # [x]_x C (X - p) = 0
            Sx = skew(x)
            rows.append(np.hstack([Sx @ C, (-Sx @ C @ p[i])[:, None]]))
        Amat = np.vstack(rows)
        _, _, Vt = np.linalg.svd(Amat)
        X = Vt[-1]
        X = X[:3] / X[3] if abs(X[3]) > 1e-12 else X[:3] * 1e6
        a = problem.anchor[j]
        fa = Cs[a] @ (X - p[a])
        if fa[2] <= 0.1:
            fa = np.array([0.0, 0.0, 3.0])
        f[j] = fa
    return MapEstimate(q, p, problem.feature_ids.copy(), problem.anchor.copy(), f, ids.copy())


def ray_parallax(problem: MapProblem, est: MapEstimate):
    """Largest angle (rad) between viewing rays of each feature."""
    cam = problem.cam
    x = np.column_stack([(problem.obs_uv[:, 0] - cam.cx) / cam.fx, (problem.obs_uv[:, 1] - cam.cy) / cam.fy,
                         np.ones(len(problem.obs_uv))])
    x /= np.linalg.norm(x, axis=1)[:, None]
    Rs = batch_rot(est.q)
    rays = np.einsum("nji,nj->ni", Rs[problem.obs_pose], x)
    m = len(problem.feature_ids)
    out = np.zeros(m)
    starts = np.searchsorted(problem.obs_feat, np.arange(m + 1))
    for j in range(m):
        r = rays[starts[j]:starts[j + 1]]
        cosang = np.clip(r @ r.T, -1.0, 1.0)
        out[j] = np.arccos(cosang.min())
    return out


def prune_weak_features(problem: MapProblem, min_parallax=np.deg2rad(2.0)):
    """Drop features whose rays (at the dead-reckoned poses) barely diverge."""
    est = initial_guess(problem)
    par = ray_parallax(problem, est)
    keep = par >= min_parallax
    if keep.all():
        return problem
    return make_problem(problem.session, problem.pose_ids, problem.cam, feature_ids=problem.feature_ids[keep])


def linearize(problem: MapProblem, est: MapEstimate, gauge=True):
    """Whitened residual vector and sparse Jacobian (d residual / d error)."""
    s = problem.session
    n, m = est.n_poses, est.n_features
    dim = est.dim
    cam = problem.cam
    Rs = batch_rot(est.q)

    res = []
    rows, cols, vals = [], [], []
    r0 = 0

    # reprojection
    oi, oj = problem.obs_pose, problem.obs_feat
    oa = est.anchor[oj]
    Ci, Ca = Rs[oi], Rs[oa]
    fj = est.f[oj]
    mpos = est.p[oa] + np.einsum("nji,nj->ni", Ca, fj)
    y = np.einsum("nij,nj->ni", Ci, mpos - est.p[oi])
    z = y[:, 2]
    if np.any(z <= 1e-4):
        raise BehindCamera("feature behind a mapping camera")
    iz = 1.0 / z
    pred = np.column_stack([cam.fx * y[:, 0] * iz + cam.cx, cam.fy * y[:, 1] * iz + cam.cy])
    sig = problem.pixel_sigma
    res.append(((problem.obs_uv - pred) / sig).ravel())
    nobs = len(oi)
    Pi = np.zeros((nobs, 2, 3))
    Pi[:, 0, 0] = cam.fx * iz
    Pi[:, 0, 2] = -cam.fx * y[:, 0] * iz * iz
    Pi[:, 1, 1] = cam.fy * iz
    Pi[:, 1, 2] = -cam.fy * y[:, 1] * iz * iz
    Pi = -Pi / sig
    same = (oi == oa)[:, None, None]
    PiCi = Pi @ Ci
    CiCaT = Ci @ np.transpose(Ca, (0, 2, 1))
    blocks = [
        (oi * 6, np.where(same, 0.0, Pi @ (-batch_skew(y)))),
        (oi * 6 + 3, np.where(same, 0.0, -PiCi)),
        (oa * 6, np.where(same, 0.0, Pi @ CiCaT @ batch_skew(fj))),
        (oa * 6 + 3, np.where(same, 0.0, PiCi)),
        (6 * n + 3 * oj, Pi @ CiCaT),
    ]
    rr = r0 + 2 * np.arange(nobs)
    for c0, B in blocks:
        R_ = rr[:, None, None] + np.arange(2)[None, :, None] + np.zeros((1, 1, 3), dtype=np.int64)
        C_ = c0[:, None, None] + np.arange(3)[None, None, :] + np.zeros((1, 2, 1), dtype=np.int64)
        rows.append(R_.ravel())
        cols.append(C_.ravel())
        vals.append(B.ravel())
    r0 += 2 * nobs

    # consecutive-keyframe motion constraints
    noise = s.noise
    srot = noise.odom_rot_sigma if noise.odom_rot_sigma > 0 else 1e-3
    spos = noise.odom_pos_sigma if noise.odom_pos_sigma > 0 else 1e-3
    stilt = noise.tilt_sigma if noise.tilt_sigma > 0 else 1e-3
    for k in range(n - 1):
        a = est.pose_ids[k]
        if est.pose_ids[k + 1] != a + 1:
            continue
        C0, C1 = Rs[k], Rs[k + 1]
        E = s.odom_rot[a] @ C0 @ C1.T
        rrot = so3_log(E)
        Jri = so3_right_jacobian_inv(rrot)
        d = est.p[k + 1] - est.p[k]
        rpos = s.odom_pos[a] - C0 @ d
        res.append(np.r_[rrot / srot, rpos / spos])
        J = np.zeros((6, 12))
        J[0:3, 0:3] = Jri @ (C1 @ C0.T) / srot
        J[0:3, 6:9] = -Jri / srot
        J[3:6, 0:3] = skew(C0 @ d) / spos
        J[3:6, 3:6] = C0 / spos
        J[3:6, 9:12] = -C0 / spos
        rr_, cc_ = np.meshgrid(r0 + np.arange(6), np.r_[6 * k + np.arange(6), 6 * (k + 1) + np.arange(6)], indexing="ij")
        rows.append(rr_.ravel())
        cols.append(cc_.ravel())
        vals.append(J.ravel())
        r0 += 6

    # gravity direction per keyframe
    ez = np.array([0.0, 0.0, 1.0])
    g_pred = Rs[:, :, 2]
    res.append(((s.tilt[est.pose_ids] - g_pred) / stilt).ravel())
    Bt = batch_skew(g_pred) / stilt
    rr = r0 + 3 * np.arange(n)
    R_ = rr[:, None, None] + np.arange(3)[None, :, None] + np.zeros((1, 1, 3), dtype=np.int64)
    C_ = (6 * np.arange(n))[:, None, None] + np.arange(3)[None, None, :] + np.zeros((1, 3, 1), dtype=np.int64)
    rows.append(R_.ravel())
    cols.append(C_.ravel())
    vals.append(Bt.ravel())
    r0 += 3 * n
    del ez

    if gauge:
        w = np.sqrt(GAUGE_INFO)
        C0 = Rs[0]
        res.append(w * np.r_[-est.p[0], -yaw_of(C0.T)])
        J = np.zeros((4, 6))
        J[0:3, 3:6] = -w * np.eye(3)
        J[3, 0:3] = -w * yaw_jacobian(C0)
        rr_, cc_ = np.meshgrid(r0 + np.arange(4), np.arange(6), indexing="ij")
        rows.append(rr_.ravel())
        cols.append(cc_.ravel())
        vals.append(J.ravel())
        r0 += 4

    r = np.concatenate(res)
    Jm = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, dim))
    return r, Jm


def normal_equations(problem, est):
    r, J = linearize(problem, est)
    H = (J.T @ J).tocsc()
    g = J.T @ r
    return H, g, r


@dataclass
class BLSResult:
    estimate: MapEstimate
    hessian: sparse.SparseSymmetric
    factor: sparse.SparseLowerTriangular
    iterations: int
    grad_norm: float
    cost: float


def _pattern_ordering(H, ordering):
    """Fill-reducing permutation computed once; the Hessian pattern does not
    change between Gauss-Newton iterations."""
    return amd_order(sp.csc_matrix(H)) if ordering == "fill_reducing" else ordering


def solve_bls(problem, est=None, max_iter=30, grad_tol=1e-6, ordering="fill_reducing"):
    """Gauss-Newton on the (sub-)map cost; Levenberg damping on cost increase."""
    est = initial_guess(problem) if est is None else est
    H, g, r = normal_equations(problem, est)
    ordering = _pattern_ordering(H, ordering)
    cost = 0.5 * r @ r
    lam = 0.0
    # large maps can sit at a gradient round-off floor above grad_tol
    stalled = False
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < grad_tol or stalled:
            break
        Hd = H + lam * sp.diags(H.diagonal()) if lam > 0 else H
        try:
            G = sparse.cholesky(Hd, ordering)
        except NotPositiveDefinite as exc:
            raise RankDeficient(f"Hessian pivot failed at column {exc.column}") from exc
        dx = -sparse.solve(G, g)
        cand = est.retract(dx)
        try:
            H2, g2, r2 = normal_equations(problem, cand)
            c2 = 0.5 * r2 @ r2
        except BehindCamera:
            c2 = np.inf
        if c2 <= cost * (1 + 1e-12) or np.linalg.norm(dx) < 1e-12:
            stalled = cost - c2 <= 1e-12 * cost
            est, H, g, r, cost = cand, H2, g2, r2, c2
            lam = 0.0 if lam < 1e-6 else lam / 10
        else:
            lam = 1e-4 if lam == 0 else lam * 10
            if lam > 1e8:
                break
    gn = float(np.linalg.norm(g))
    if gn >= grad_tol and not stalled:
        raise NotConverged(it + 1, gn)
    try:
        G = sparse.cholesky(H, ordering)
    except NotPositiveDefinite as exc:
        raise RankDeficient(f"Hessian pivot failed at column {exc.column}") from exc
    return BLSResult(est, sparse.SparseSymmetric.from_matrix(H), G, it + 1, gn, cost)


def build_map_bls(session, cam=None, ordering="fill_reducing", **kw):
    """Single-map batch least squares over every keyframe of ``session``."""
    cam = cam or CameraModel()
    if len(session.frames) < 2:
        raise TooFewPoses("session has fewer than 2 camera frames")
    problem = make_problem(session, np.arange(len(session.frames)), cam, min_parallax=MIN_PARALLAX)
    return solve_bls(problem, ordering=ordering, **kw), problem


@dataclass
class SubmapPartition:
    ranges: list                # [(start, stop)] keyframe ranges, stop exclusive
    features: list              # per-segment feature id arrays
    common: np.ndarray          # ids present in both segments (two-map case)


def partition_submaps(session, count=2, min_poses=3):
    """Time-even split of the keyframes; features are assigned to every
    segment in which they are observed at least twice."""
    n = len(session.frames)
    if count < 2:
        raise ValueError("count must be >= 2")
    if n < count * min_poses:
        raise TooFewPoses(f"{n} poses cannot form {count} segments of >= {min_poses}")
    edges = np.round(np.linspace(0, n, count + 1)).astype(int)
    ranges = [(int(edges[i]), int(edges[i + 1])) for i in range(count)]
    feats = []
    for a, b in ranges:
        ids = np.concatenate([fr.ids[~fr.is_outlier] for fr in session.frames[a:b]])
        u, c = np.unique(ids, return_counts=True)
        feats.append(u[c >= 2])
    common = np.intersect1d(feats[0], feats[1]) if count == 2 else np.array([], dtype=np.int64)
    return SubmapPartition(ranges, feats, common)


def align_4dof(src, dst, weights=None):
    """Yaw + translation ``T`` minimizing ``sum |dst - T(src)|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    cs = (w[:, None] * src).sum(0) / w.sum()
    cd = (w[:, None] * dst).sum(0) / w.sum()
    a, b = src - cs, dst - cd
    num = np.sum(w * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = np.sum(w * (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    yaw = float(np.arctan2(num, den))
    t = cd - rot_z(yaw) @ cs
    return yaw, t


def _feature_world_jac(est: MapEstimate, j):
    """Map-frame feature position and its Jacobian blocks (anchor pose, feature)."""
    a = est.anchor[j]
    Ca = quat_to_rot(est.q[a])
    f = est.f[j]
    pos = est.p[a] + Ca.T @ f
    # C^T Exp(-d) f = C^T f + C^T [f]x d
    return pos, a, Ca.T @ skew(f), np.eye(3), Ca.T


def constraint_system(est1, est2, xtau, common):
    """Residual ``c`` and Jacobians ``(A1, A2, B)`` of
    ``m1(f) - T(xtau) m2(f) = 0`` for the common feature ids."""
    yaw, t = xtau[0], xtau[1:4]
    Rz = rot_z(yaw)
    idx1 = {fid: j for j, fid in enumerate(est1.feature_ids)}
    idx2 = {fid: j for j, fid in enumerate(est2.feature_ids)}
    k = len(common)
    c = np.zeros(3 * k)
    A1 = sp.lil_matrix((3 * k, est1.dim))
    A2 = sp.lil_matrix((3 * k, est2.dim))
    B = np.zeros((3 * k, 4))
    ez = np.array([0.0, 0.0, 1.0])
    for r, fid in enumerate(common):
        j1, j2 = idx1[fid], idx2[fid]
        m1, a1, Jt1, Jp1, Jf1 = _feature_world_jac(est1, j1)
        m2, a2, Jt2, Jp2, Jf2 = _feature_world_jac(est2, j2)
        rows = slice(3 * r, 3 * r + 3)
        c[rows] = m1 - (t + Rz @ m2)
        A1[rows, 6 * a1:6 * a1 + 3] = Jt1
        A1[rows, 6 * a1 + 3:6 * a1 + 6] = Jp1
        o1 = est1.feature_offset(j1)
        A1[rows, o1:o1 + 3] = Jf1
        A2[rows, 6 * a2:6 * a2 + 3] = -Rz @ Jt2
        A2[rows, 6 * a2 + 3:6 * a2 + 6] = -Rz @ Jp2
        o2 = est2.feature_offset(j2)
        A2[rows, o2:o2 + 3] = -Rz @ Jf2
        B[rows, 0] = -np.cross(ez, Rz @ m2)
        B[rows, 1:4] = -np.eye(3)
    return c, A1.tocsr(), A2.tocsr(), B


@dataclass
class CMResult:
    estimates: list             # [MapEstimate, MapEstimate]
    hessians: list              # [SparseSymmetric, SparseSymmetric] of each own cost
    factors: list               # [SparseLowerTriangular, ...]
    xtau: np.ndarray | None     # sub-map 2 frame -> sub-map 1 frame
    common: np.ndarray
    constraint_violation: float
    iterations: int
    problems: list = field(default_factory=list)


def solve_kkt_step(G1, G2, g1, g2, c, A1, A2, B):
    """Range-space solve of the equality-constrained GN step.

    Returns ``(dx1, dx2, dtau, lam)`` for
    ``min 0.5 dx^T H dx + g^T dx  s.t.  A1 dx1 + A2 dx2 + B dtau + c = 0``.
    """
    Hg1 = sparse.solve(G1, g1)
    Hg2 = sparse.solve(G2, g2)
    HA1 = sparse.solve(G1, A1.T.toarray())
    HA2 = sparse.solve(G2, A2.T.toarray())
    Theta = A1 @ HA1 + A2 @ HA2
    k = Theta.shape[0]
    W_inv = np.block([[Theta, -B], [-B.T, np.zeros((4, 4))]])
    rhs = np.r_[c - A1 @ Hg1 - A2 @ Hg2, np.zeros(4)]
    try:
        sol = np.linalg.solve(W_inv, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConstraintInfeasible("singular constraint system") from exc
    lam, dtau = sol[:k], sol[k:]
    dx1 = -(Hg1 + HA1 @ lam)
    dx2 = -(Hg2 + HA2 @ lam)
    return dx1, dx2, dtau, lam


def solve_cm_constrained(partition: SubmapPartition, session, cam=None, max_iter=30, tol=1e-8,
                         ordering="fill_reducing"):
    """Minimize the sum of both sub-map costs subject to the common-feature
    constraints; returns each sub-map's own-cost Hessian at the solution."""
    cam = cam or CameraModel()
    if len(partition.ranges) != 2:
        raise ValueError("solve_cm_constrained handles two sub-maps; use build_submaps for more")
    probs = [make_problem(session, np.arange(a, b), cam, feature_ids=fs, min_parallax=MIN_PARALLAX)
             for (a, b), fs in zip(partition.ranges, partition.features)]
    sols = [solve_bls(p, ordering=ordering) for p in probs]
    ests = [s.estimate for s in sols]
    common = np.intersect1d(np.intersect1d(partition.common, ests[0].feature_ids), ests[1].feature_ids)
    if len(common) == 0:
        return CMResult(ests, [s.hessian for s in sols], [s.factor for s in sols], None, common, 0.0, 0, probs)
    if len(common) < 2:
        raise ConstraintInfeasible("need at least two common features to fix the inter-map transform")

    m1 = ests[0].feature_positions()[np.searchsorted(ests[0].feature_ids, common)]
    m2 = ests[1].feature_positions()[np.searchsorted(ests[1].feature_ids, common)]
    yaw, t = align_4dof(m2, m1)
    xtau = np.r_[yaw, t]

    it = 0
    orders = [_pattern_ordering(normal_equations(p, e)[0], ordering) for p, e in zip(probs, ests)]
    for it in range(1, max_iter + 1):
        H1, g1, _ = normal_equations(probs[0], ests[0])
        H2, g2, _ = normal_equations(probs[1], ests[1])
        G1 = sparse.cholesky(H1, orders[0])
        G2 = sparse.cholesky(H2, orders[1])
        c, A1, A2, B = constraint_system(ests[0], ests[1], xtau, common)
        dx1, dx2, dtau, lam = solve_kkt_step(G1, G2, g1, g2, c, A1, A2, B)
        ests = [ests[0].retract(dx1), ests[1].retract(dx2)]
        xtau = xtau + dtau
        step = max(np.abs(dx1).max(), np.abs(dx2).max(), np.abs(dtau).max())
        c_new = constraint_system(ests[0], ests[1], xtau, common)[0]
        viol = float(np.abs(c_new).max())
        if step < 1e-10 and viol <= tol:
            break
    else:
        raise NotConverged(max_iter, step)

    hess, facs = [], []
    for p, e, o in zip(probs, ests, orders):
        H, _, _ = normal_equations(p, e)
        hess.append(sparse.SparseSymmetric.from_matrix(H))
        facs.append(sparse.cholesky(H, o))
    return CMResult(ests, hess, facs, xtau, common, viol, it, probs)


def kkt_matrix(H1, H2, A1, A2, B):
    """Dense KKT matrix ordered ``(x1, x2, lambda, xtau)``."""
    n1, n2 = H1.shape[0], H2.shape[0]
    k = B.shape[0]
    K = np.zeros((n1 + n2 + k + 4, n1 + n2 + k + 4))
    H1 = H1.toarray() if sp.issparse(H1) else H1
    H2 = H2.toarray() if sp.issparse(H2) else H2
    A1 = A1.toarray() if sp.issparse(A1) else A1
    A2 = A2.toarray() if sp.issparse(A2) else A2
    K[:n1, :n1] = H1
    K[n1:n1 + n2, n1:n1 + n2] = H2
    K[:n1, n1 + n2:n1 + n2 + k] = A1.T
    K[n1:n1 + n2, n1 + n2:n1 + n2 + k] = A2.T
    K[n1 + n2:n1 + n2 + k, :n1] = A1
    K[n1 + n2:n1 + n2 + k, n1:n1 + n2] = A2
    K[n1 + n2:n1 + n2 + k, n1 + n2 + k:] = B
    K[n1 + n2 + k:, n1 + n2:n1 + n2 + k] = B.T
    return K


# ---------------------------------------------------------------- bundles

@dataclass
class SubMap:
    """One sub-map as shipped to the localizer."""

    pose_t: np.ndarray          # (n,)
    pose_q: np.ndarray          # (n, 4) map-to-pose rotations
    pose_p: np.ndarray          # (n, 3)
    feature_ids: np.ndarray     # (m,) sorted
    anchor: np.ndarray          # (m,) local anchor pose index
    f_anchor: np.ndarray        # (m, 3)
    obs_pose: np.ndarray        # co-visibility: pose index per observation
    obs_feat: np.ndarray        # co-visibility: feature index per observation
    factor: sparse.SparseLowerTriangular
    # ground-truth map-to-world transform (yaw, x, y, z) when simulated, else NaN
    truth_transform: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))

    @property
    def n_poses(self):
        return len(self.pose_q)

    @property
    def n_features(self):
        return len(self.feature_ids)

    @property
    def dim(self):
        return 6 * self.n_poses + 3 * self.n_features

    def pose_offset(self, i):
        return 6 * i

    def feature_offset(self, j):
        return 6 * self.n_poses + 3 * j

    def layout(self):
        """Index-layout table: ``(kind, entity, offset, size)`` rows, kind 0 =
        pose, 1 = feature."""
        n, m = self.n_poses, self.n_features
        rows = np.zeros((n + m, 4), dtype=np.int64)
        rows[:n, 0] = 0
        rows[:n, 1] = np.arange(n)
        rows[:n, 2] = 6 * np.arange(n)
        rows[:n, 3] = 6
        rows[n:, 0] = 1
        rows[n:, 1] = self.feature_ids
        rows[n:, 2] = 6 * n + 3 * np.arange(m)
        rows[n:, 3] = 3
        return rows

    def feature_positions(self):
        Ca = batch_rot(self.pose_q[self.anchor])
        return self.pose_p[self.anchor] + np.einsum("nji,nj->ni", Ca, self.f_anchor)

    def feature_index(self, fid):
        j = int(np.searchsorted(self.feature_ids, fid))
        if j < len(self.feature_ids) and self.feature_ids[j] == fid:
            return j
        return -1

    def validate(self):
        n, m = self.n_poses, self.n_features
        if self.pose_q.shape != (n, 4) or self.pose_p.shape != (n, 3) or self.pose_t.shape != (n,):
            raise FormatError("pose arrays disagree in length")
        if np.any(np.abs(np.linalg.norm(self.pose_q, axis=1) - 1.0) > 1e-9):
            raise FormatError("pose quaternions are not unit-norm")
        if self.anchor.shape != (m,) or self.f_anchor.shape != (m, 3):
            raise FormatError("feature arrays disagree in length")
        if m and (self.anchor.min() < 0 or self.anchor.max() >= n):
            raise FormatError("anchor index out of range")
        if np.any(np.diff(self.feature_ids) <= 0):
            raise FormatError("feature ids must be sorted and unique")
        if len(self.obs_pose) != len(self.obs_feat):
            raise FormatError("co-visibility arrays disagree")
        if len(self.obs_pose) and (self.obs_pose.max() >= n or self.obs_feat.max() >= m
                                   or min(self.obs_pose.min(), self.obs_feat.min()) < 0):
            raise FormatError("co-visibility index out of range")
        if self.factor.dim != self.dim:
            raise FormatError(f"factor dim {self.factor.dim} != sub-map state dim {self.dim}")
        return self


@dataclass
class MapBundle:
    submaps: list
    # (L-1, 4): transform of sub-map i+1 into sub-map i's frame (NaN if unknown)
    inter_transforms: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    sigma: float = 1.0

    def validate(self):
        for s in self.submaps:
            s.validate()
        if self.inter_transforms.shape != (max(len(self.submaps) - 1, 0), 4):
            raise FormatError("inter-map transform table has the wrong shape")
        return self

    def snapshot(self):
        """Bytes of everything the localizer must leave untouched."""
        return b"".join(s.feature_ids.tobytes() + s.f_anchor.tobytes() + s.pose_q.tobytes()
                        + s.pose_p.tobytes() + s.factor.to_bytes() for s in self.submaps)


def truth_transform(session, k):
    """World pose of the frame defined by keyframe ``k`` (yaw, position)."""
    R = quat_to_rot(session.q[k]).T
    return np.r_[yaw_of(R), session.p[k]]


def submap_from_estimate(est: MapEstimate, problem: MapProblem, factor, session=None):
    tt = truth_transform(session, int(est.pose_ids[0])) if session is not None and hasattr(session, "q") \
        else np.full(4, np.nan)
    return SubMap(np.asarray(problem.session.t)[est.pose_ids].astype(float), est.q.copy(), est.p.copy(),
                  est.feature_ids.astype(np.int64), est.anchor.astype(np.int64), est.f.copy(),
                  problem.obs_pose.astype(np.int64), problem.obs_feat.astype(np.int64), factor, tt)


def bundle_from_bls(result: BLSResult, problem: MapProblem, session):
    sigma = session.noise.pixel_sigma if session.noise.pixel_sigma > 0 else 1.0
    sm = submap_from_estimate(result.estimate, problem, result.factor, session)
    return MapBundle([sm], np.zeros((0, 4)), sigma=sigma).validate()


def bundle_from_cm(result: CMResult, session):
    sigma = session.noise.pixel_sigma if session.noise.pixel_sigma > 0 else 1.0
    subs = [submap_from_estimate(e, p, f, session) for e, p, f in zip(result.estimates, result.problems, result.factors)]
    xt = np.full((1, 4), np.nan) if result.xtau is None else result.xtau[None, :].copy()
    return MapBundle(subs, xt, sigma=sigma).validate()


def build_submaps(session, count=2, cam=None, ordering="fill_reducing"):
    """``count`` sub-maps; more than two are built by splitting pairwise
    (each consecutive pair solved with the two-map constrained scheme)."""
    if count == 2:
        part = partition_submaps(session, 2)
        return bundle_from_cm(solve_cm_constrained(part, session, cam, ordering=ordering), session)
    part = partition_submaps(session, count)
    subs, inter = [], []
    for i in range(count - 1):
        a0, a1 = part.ranges[i]
        b0, b1 = part.ranges[i + 1]
        pair = SubmapPartition([(a0, a1), (b0, b1)], [part.features[i], part.features[i + 1]],
                               np.intersect1d(part.features[i], part.features[i + 1]))
        res = solve_cm_constrained(pair, session, cam, ordering=ordering)
        b = bundle_from_cm(res, session)
        if i == 0:
            subs.append(b.submaps[0])
        subs.append(b.submaps[1])
        inter.append(b.inter_transforms[0])
    sigma = session.noise.pixel_sigma if session.noise.pixel_sigma > 0 else 1.0
    return MapBundle(subs, np.array(inter), sigma=sigma).validate()


BUNDLE_MAGIC = b"CSKB"
BUNDLE_VERSION = 1


def export_bundle(path, bundle: MapBundle):
    """Write ``bundle`` as a versioned binary container with a CRC-64 trailer."""
    bundle.validate()
    parts = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(bundle.submaps)),
             np.asarray(bundle.gravity, "<f8").tobytes(), struct.pack("<d", bundle.sigma),
             np.asarray(bundle.inter_transforms, "<f8").tobytes()]
    for s in bundle.submaps:
        parts.append(struct.pack("<QQQ", s.n_poses, s.n_features, len(s.obs_pose)))
        parts += [s.pose_t.astype("<f8").tobytes(), s.pose_q.astype("<f8").tobytes(),
                  s.pose_p.astype("<f8").tobytes(), s.feature_ids.astype("<i8").tobytes(),
                  s.anchor.astype("<i8").tobytes(), s.f_anchor.astype("<f8").tobytes(),
                  s.obs_pose.astype("<i8").tobytes(), s.obs_feat.astype("<i8").tobytes(),
                  s.layout().astype("<i8").tobytes(), np.asarray(s.truth_transform, "<f8").tobytes()]
        fb = s.factor.to_bytes()
        parts += [struct.pack("<Q", len(fb)), fb]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", crc64(body)))


def import_bundle(path) -> MapBundle:
    with open(path, "rb") as fh:
        buf = fh.read()
    return bundle_from_bytes(buf)


def bundle_from_bytes(buf) -> MapBundle:
    if len(buf) < 16 or buf[:4] != BUNDLE_MAGIC:
        raise FormatError("not a map bundle")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != BUNDLE_VERSION:
        raise VersionMismatch(f"bundle version {version}, expected {BUNDLE_VERSION}")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    pos = 12

    def take(count_, dtype, shape=None):
        nonlocal pos
        size = 8 * count_
        if pos + size > len(body):
            raise FormatError("truncated bundle")
        arr = np.frombuffer(body, dtype=dtype, count=count_, offset=pos).copy()
        pos += size
        return arr if shape is None else arr.reshape(shape)

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise FormatError("truncated bundle")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    gravity = take(3, "<f8")
    (sigma,) = unpack("<d")
    inter = take(4 * max(count - 1, 0), "<f8", (max(count - 1, 0), 4))
    subs = []
    for _ in range(count):
        n, m, k = unpack("<QQQ")
        if n > len(body) or m > len(body) or k > len(body):
            raise FormatError("implausible section sizes")
        pose_t = take(n, "<f8")
        pose_q = take(4 * n, "<f8", (n, 4))
        pose_p = take(3 * n, "<f8", (n, 3))
        fids = take(m, "<i8").astype(np.int64)
        anchor = take(m, "<i8").astype(np.int64)
        f = take(3 * m, "<f8", (m, 3))
        op = take(k, "<i8").astype(np.int64)
        of = take(k, "<i8").astype(np.int64)
        layout = take(4 * (n + m), "<i8", (n + m, 4))
        tt = take(4, "<f8")
        (flen,) = unpack("<Q")
        if pos + flen > len(body):
            raise FormatError("truncated factor section")
        G, used = sparse.SparseLowerTriangular.from_bytes(body[pos:pos + flen])
        if used != flen:
            raise FormatError("factor section length mismatch")
        pos += flen
        sm = SubMap(pose_t, pose_q, pose_p, fids, anchor, f, op, of, G, tt)
        if not np.array_equal(layout, sm.layout()):
            raise FormatError("index-layout table disagrees with the section contents")
        subs.append(sm)
    if pos != len(body):
        raise FormatError("trailing bytes after the last section")
    if crc64(body) != stored:
        raise ChecksumMismatch("bundle checksum mismatch")
    return MapBundle(subs, inter, gravity, float(sigma)).validate()
