"""Map-based visual-inertial estimator with a factorized map cross-covariance.

Device error-state layout::

    [dtheta, dp, dbg, dv, dba]   15   (evolving IMU state)
    [dtheta_i, dp_i] * n_clones   6n  (sliding window, oldest first)
    [dyaw_j, dp_M_j] * n_maps     4L  (map-to-global transforms, in
                                       initialization order)

The covariance of the device with sub-map ``i`` is ``Gamma_i @ inv(G_i)``
(in the factor's permuted coordinates), so the map covariance
``inv(G_i G_i^T)`` is never formed. :class:`DenseJointBelief` keeps the
materialized joint covariance instead and serves as the reference
implementation.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import chi2

from . import _imu, sparse
from .errors import (DegenerateGeometry, InsufficientFeatures, MahalanobisReject, NonMonotonicTimestamps,
                     SingularInnovation, TriangulationFailed)
from .geom import GRAVITY, quat_exp, quat_multiply, quat_normalize, quat_to_rot, skew

log = logging.getLogger(__name__)

E_DIM = 15
CLONE_DIM = 6
TAU_DIM = 4
WINDOW = 10


@dataclass
class Clone:
    q: np.ndarray
    p: np.ndarray
    t: float
    cid: int


@dataclass
class DeviceState:
    q: np.ndarray
    p: np.ndarray
    bg: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    t: float
    clones: list = field(default_factory=list)
    # sub-map id -> (yaw, px, py, pz), kept in initialization order
    transforms: dict = field(default_factory=dict)
    next_cid: int = 0

    @property
    def n_clones(self):
        return len(self.clones)

    @property
    def dim(self):
        return E_DIM + CLONE_DIM * self.n_clones + TAU_DIM * len(self.transforms)

    def clone_offset(self, i):
        return E_DIM + CLONE_DIM * i

    def clone_index(self, cid):
        for i, c in enumerate(self.clones):
            if c.cid == cid:
                return i
        raise KeyError(cid)

    def tau_offset(self, sid):
        base = E_DIM + CLONE_DIM * self.n_clones
        return base + TAU_DIM * list(self.transforms).index(sid)

    def rotation(self):
        return quat_to_rot(self.q)

    def apply_correction(self, dx):
        dx = np.asarray(dx)
        self.q = quat_normalize(quat_multiply(quat_exp(dx[0:3]), self.q))
        self.p = self.p + dx[3:6]
        self.bg = self.bg + dx[6:9]
        self.v = self.v + dx[9:12]
        self.ba = self.ba + dx[12:15]
        for i, c in enumerate(self.clones):
            o = self.clone_offset(i)
            c.q = quat_normalize(quat_multiply(quat_exp(dx[o:o + 3]), c.q))
            c.p = c.p + dx[o + 3:o + 6]
        for sid in self.transforms:
            o = self.tau_offset(sid)
            self.transforms[sid] = self.transforms[sid] + dx[o:o + 4]

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class FilterBelief:
    """Device covariance ``P`` (``P_RR``) plus one cross factor per sub-map."""

    P: np.ndarray
    factors: dict                               # sub-map id -> SparseLowerTriangular
    gammas: dict = field(default_factory=dict)  # sub-map id -> (d, dim_i); absent means zero

    def copy(self):
        return FilterBelief(self.P.copy(), self.factors, {k: v.copy() for k, v in self.gammas.items()})

    def gamma(self, sid, d):
        g = self.gammas.get(sid)
        return np.zeros((d, self.factors[sid].dim)) if g is None else g

    def propagate(self, Phi_E, Q_E):
        P = self.P
        P[:E_DIM, :] = Phi_E @ P[:E_DIM, :]
        P[:, :E_DIM] = P[:, :E_DIM] @ Phi_E.T
        P[:E_DIM, :E_DIM] += Q_E
        self.P = _symmetrize(P)
        for g in self.gammas.values():
            g[:E_DIM, :] = Phi_E @ g[:E_DIM, :]

    def reindex(self, idx):
        """Rows/columns ``idx`` of the device block (copies or deletions)."""
        self.P = self.P[np.ix_(idx, idx)]
        for sid in list(self.gammas):
            self.gammas[sid] = np.ascontiguousarray(self.gammas[sid][idx])


@dataclass
class MeasurementBatch:
    """Stacked linearized measurements of one sub-map (or of no map)."""

    r: np.ndarray
    H_R: np.ndarray
    sigma: float
    H_M: np.ndarray | None = None
    submap: int | None = None

    def __post_init__(self):
        m = len(self.r)
        if self.H_R.shape[0] != m or (self.H_M is not None and self.H_M.shape[0] != m):
            from .errors import DimensionMismatch
            raise DimensionMismatch("measurement rows disagree")


# ---------------------------------------------------------------- helpers

def _symmetrize(P, label="P"):
    asym = np.max(np.abs(P - P.T)) if P.size else 0.0
    if asym > 1e-9 * max(1.0, np.max(np.abs(P))):
        log.debug("%s asymmetry %.2e before symmetrization", label, asym)
    return 0.5 * (P + P.T)


def _chol(S):
    try:
        return sla.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc


def _cho_solve(c, B):
    return sla.cho_solve(c, B, check_finite=False)


def noise_psd(noise):
    """Diagonal continuous-time PSD over the evolving error state."""
    qc = np.zeros(15)
    qc[0:3] = noise.gyro_noise ** 2
    qc[6:9] = noise.gyro_walk ** 2
    qc[9:12] = noise.accel_noise ** 2
    qc[12:15] = noise.accel_walk ** 2
    return qc


def device_transition(state: DeviceState, Phi_E, Q_E):
    d = state.dim
    Phi = np.eye(d)
    Phi[:E_DIM, :E_DIM] = Phi_E
    Q = np.zeros((d, d))
    Q[:E_DIM, :E_DIM] = Q_E
    return Phi, Q


# ---------------------------------------------------------------- propagation

def integrate_imu(state: DeviceState, t, gyro, accel, noise, gyro_mid=None, accel_mid=None):
    """Nominal-state RK4 over the samples; returns ``(Phi_E, Q_E)`` and
    advances ``state`` in place.

    Mid-interval rates default to a cubic interpolation of the given
    samples; pass them explicitly to use neighbours outside the span.
    """
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return np.eye(E_DIM), np.zeros((E_DIM, E_DIM))
    if np.any(np.diff(t) <= 0) or t[0] < state.t - 1e-12:
        raise NonMonotonicTimestamps("IMU samples must be strictly increasing and not precede the state")
    gyro = np.ascontiguousarray(gyro, dtype=float)
    accel = np.ascontiguousarray(accel, dtype=float)
    gyro_mid = _imu.midpoints(gyro) if gyro_mid is None else np.ascontiguousarray(gyro_mid, dtype=float)
    accel_mid = _imu.midpoints(accel) if accel_mid is None else np.ascontiguousarray(accel_mid, dtype=float)
    q, p, v, Phi, Q = _imu.integrate(state.q, state.p, state.v, state.bg, state.ba, t, gyro, accel,
                                     gyro_mid, accel_mid, noise_psd(noise), GRAVITY)
    state.q, state.p, state.v = q, p, v
    state.t = float(t[-1])
    return Phi, Q


def propagate(state: DeviceState, belief, t, gyro, accel, noise, gyro_mid=None, accel_mid=None):
    """Advance the state through IMU samples ``t`` and propagate the belief.

    ``P <- Phi P Phi^T + Q`` on the device block and ``Gamma_i <- Phi Gamma_i``;
    the map is untouched.
    """
    Phi_E, Q_E = integrate_imu(state, t, gyro, accel, noise, gyro_mid, accel_mid)
    belief.propagate(Phi_E, Q_E)
    return state, belief


# ---------------------------------------------------------------- window

def clone_and_marginalize(state: DeviceState, belief, window=WINDOW):
    """Append a clone of the current pose; drop the oldest beyond ``window``."""
    d = state.dim
    n = state.n_clones
    insert_at = E_DIM + CLONE_DIM * n
    src = np.r_[np.arange(insert_at), np.arange(6), np.arange(insert_at, d)]
    belief.reindex(src)
    state.clones.append(Clone(state.q.copy(), state.p.copy(), state.t, state.next_cid))
    state.next_cid += 1
    if state.n_clones > window:
        marginalize_clone(state, belief, 0)
    return state, belief


def marginalize_clone(state: DeviceState, belief, i):
    d = state.dim
    o = state.clone_offset(i)
    keep = np.r_[np.arange(o), np.arange(o + CLONE_DIM, d)]
    belief.reindex(keep)
    del state.clones[i]
    return state, belief


# ---------------------------------------------------------------- belief back-ends

@dataclass
class DenseJointBelief:
    """Materialized joint covariance over ``[device | map_1 | map_2 | ...]``."""

    P: np.ndarray
    device_dim: int
    map_dims: dict              # sub-map id -> dim, in storage order

    @classmethod
    def from_factorized(cls, belief: FilterBelief, order=None):
        order = list(belief.factors) if order is None else order
        d = belief.P.shape[0]
        dims = {sid: belief.factors[sid].dim for sid in order}
        n = d + sum(dims.values())
        P = np.zeros((n, n))
        P[:d, :d] = belief.P
        o = d
        for sid in order:
            G = belief.factors[sid]
            m = G.dim
            P[o:o + m, o:o + m] = sparse.solve(G, np.eye(m))
            if sid in belief.gammas:
                PRM = sparse.forward_solve(G, belief.gammas[sid].T).T
                P[:d, o:o + m] = PRM
                P[o:o + m, :d] = PRM.T
            o += m
        return cls(0.5 * (P + P.T), d, dims)

    def map_slice(self, sid):
        o = self.device_dim
        for k, m in self.map_dims.items():
            if k == sid:
                return slice(o, o + m)
            o += m
        raise KeyError(sid)

    def copy(self):
        return DenseJointBelief(self.P.copy(), self.device_dim, dict(self.map_dims))

    def propagate(self, Phi_E, Q_E):
        P = self.P
        P[:E_DIM, :] = Phi_E @ P[:E_DIM, :]
        P[:, :E_DIM] = P[:, :E_DIM] @ Phi_E.T
        P[:E_DIM, :E_DIM] += Q_E
        self.P = 0.5 * (P + P.T)

    def reindex(self, idx):
        d = self.device_dim
        full = np.r_[np.asarray(idx), np.arange(d, self.P.shape[0])]
        self.P = self.P[np.ix_(full, full)]
        self.device_dim = len(idx)

    @property
    def P_RR(self):
        d = self.device_dim
        return self.P[:d, :d]


# ---------------------------------------------------------------- dense reference updates

def dense_ekf_update(x, P, H, r, R):
    """Joseph-form EKF update; returns ``(x + dx, P+)``."""
    x = np.asarray(x, dtype=float)
    S = H @ P @ H.T + R
    c = _chol(S)
    K = _cho_solve(c, H @ P).T
    I_KH = np.eye(P.shape[0]) - K @ H
    P_new = I_KH @ P @ I_KH.T + K @ R @ K.T
    return x + K @ r, 0.5 * (P_new + P_new.T)


def dense_skf_update(x, P, H, r, R, n_device):
    """Schmidt update: the gain rows of everything past ``n_device`` are
    zeroed, so those states and their covariance block stay fixed."""
    x = np.asarray(x, dtype=float)
    S = H @ P @ H.T + R
    c = _chol(S)
    K = _cho_solve(c, H @ P).T
    K[n_device:] = 0.0
    I_KH = np.eye(P.shape[0]) - K @ H
    P_new = I_KH @ P @ I_KH.T + K @ R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    return x + K @ r, P_new


# ---------------------------------------------------------------- local features

def triangulate(cam, quats, positions, uv, sigma, iters=10):
    """Gauss-Newton on inverse depth anchored at the first view.

    Returns the global position; raises :class:`TriangulationFailed` on a
    non-positive depth or a cost above the 95% chi-square bound.
    """
    n = len(quats)
    if n < 2:
        raise TriangulationFailed("need two views")
    Cs = [quat_to_rot(q) for q in quats]
    C0, p0 = Cs[0], positions[0]
    # linear initialization in the global frame
    rows = []
    for C, p, z in zip(Cs, positions, uv):
        x = np.array([(z[0] - cam.cx) / cam.fx, (z[1] - cam.cy) / cam.fy, 1.0])
        Sx = skew(x)
        rows.append(np.hstack([Sx @ C, (-Sx @ C @ p)[:, None]]))
    _, _, Vt = np.linalg.svd(np.vstack(rows))
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise TriangulationFailed("point at infinity")
    f0 = C0 @ (X[:3] / X[3] - p0)
    if f0[2] <= 0:
        raise TriangulationFailed("non-positive depth")
    th = np.array([f0[0] / f0[2], f0[1] / f0[2], 1.0 / f0[2]])
    rel = [(C @ C0.T, C @ (p0 - p)) for C, p in zip(Cs, positions)]
    for _ in range(iters):
        H = np.zeros((2 * n, 3))
        res = np.zeros(2 * n)
        for i, ((Ri, ti), z) in enumerate(zip(rel, uv)):
            # y / rho = R (a, b, 1) + rho t
            h = Ri @ np.array([th[0], th[1], 1.0]) + th[2] * ti
            if h[2] <= 0:
                raise TriangulationFailed("non-positive depth")
            dh = np.column_stack([Ri[:, 0], Ri[:, 1], ti])
            iz = 1.0 / h[2]
            Pi = np.array([[cam.fx * iz, 0, -cam.fx * h[0] * iz * iz], [0, cam.fy * iz, -cam.fy * h[1] * iz * iz]])
            res[2 * i:2 * i + 2] = z - np.array([cam.fx * h[0] * iz + cam.cx, cam.fy * h[1] * iz + cam.cy])
            H[2 * i:2 * i + 2] = Pi @ dh
        try:
            step = np.linalg.lstsq(H, res, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise TriangulationFailed("singular triangulation") from exc
        th = th + step
        if np.linalg.norm(step) < 1e-10:
            break
    if th[2] <= 0:
        raise TriangulationFailed("non-positive depth")
    pf = p0 + C0.T @ (np.array([th[0], th[1], 1.0]) / th[2])
    cost = 0.0
    for C, p, z in zip(Cs, positions, uv):
        y = C @ (pf - p)
        if y[2] <= 0:
            raise TriangulationFailed("non-positive depth")
        pred = np.array([cam.fx * y[0] / y[2] + cam.cx, cam.fy * y[1] / y[2] + cam.cy])
        cost += np.sum((z - pred) ** 2)
    if cost / sigma ** 2 > chi2.ppf(0.95, max(2 * n - 3, 1)):
        raise TriangulationFailed(f"reprojection cost {cost / sigma**2:.1f} too large")
    return pf


def local_feature_rows(cam, state: DeviceState, track, sigma):
    """Null-space projected rows ``(H_o, r_o)`` of one feature track.

    ``track`` is a sequence of ``(clone_id, uv)``.
    """
    from .geom import local_feature_jacobians
    idx = [state.clone_index(cid) for cid, _ in track]
    uv = np.array([z for _, z in track])
    quats = [state.clones[i].q for i in idx]
    pos = [state.clones[i].p for i in idx]
    pf = triangulate(cam, quats, pos, uv, sigma)
    z_hat, Hp, Hf, ok = local_feature_jacobians(cam, quats, pos, pf)
    if not ok.all():
        raise TriangulationFailed("feature behind a clone")
    n = len(idx)
    Hx = np.zeros((2 * n, state.dim))
    for k, i in enumerate(idx):
        o = state.clone_offset(i)
        Hx[2 * k:2 * k + 2, o:o + 6] = Hp[k]
    r = (uv - z_hat).ravel()
    Q, _ = np.linalg.qr(Hf, mode="complete")
    U = Q[:, 3:]
    return U.T @ Hx, U.T @ r


def local_feature_update(state: DeviceState, belief, tracks, cam, sigma, gate_prob=0.95):
    """MSCKF update from finished feature tracks.

    Tracks that fail triangulation or the chi-square test are skipped;
    returns ``(state, belief, n_used)``.
    """
    H_list, r_list = [], []
    P = _device_P(belief)
    for track in tracks:
        try:
            Ho, ro = local_feature_rows(cam, state, track, sigma)
        except TriangulationFailed:
            continue
        S = Ho @ P @ Ho.T + sigma ** 2 * np.eye(len(ro))
        try:
            d2 = ro @ _cho_solve(_chol(S), ro)
        except SingularInnovation:
            continue
        if d2 > chi2.ppf(gate_prob, len(ro)):
            continue
        H_list.append(Ho)
        r_list.append(ro)
    if not H_list:
        return state, belief, 0
    H = np.vstack(H_list)
    r = np.concatenate(r_list)
    if H.shape[0] > H.shape[1]:
        # thin QR keeps the innovation small; the noise stays isotropic
        Q1, T = np.linalg.qr(H)
        H, r = T, Q1.T @ r
    apply_device_update(state, belief, H, r, sigma)
    return state, belief, len(H_list)


def _device_P(belief):
    return belief.P_RR if isinstance(belief, DenseJointBelief) else belief.P


def apply_device_update(state, belief, H, r, sigma):
    """Update with rows that involve the device state only."""
    m = len(r)
    if isinstance(belief, DenseJointBelief):
        d = belief.device_dim
        Hf = np.zeros((m, belief.P.shape[0]))
        Hf[:, :d] = H
        x = np.zeros(belief.P.shape[0])
        dx, belief.P = dense_skf_update(x, belief.P, Hf, r, sigma ** 2 * np.eye(m), d)
        state.apply_correction(dx[:d])
        return
    P = belief.P
    PH = P @ H.T
    S = H @ PH + sigma ** 2 * np.eye(m)
    c = _chol(S)
    W = _cho_solve(c, PH.T)            # S^-1 K^T
    dx = W.T @ r
    belief.P = _symmetrize(P - PH @ W)
    for sid, g in belief.gammas.items():
        belief.gammas[sid] = g - W.T @ (H @ g)
    state.apply_correction(dx)


# ---------------------------------------------------------------- map updates

def back_solve_J(G, H_M):
    """``J`` with ``G J^T = P H_M^T`` (factor coordinates)."""
    H_M = np.asarray(H_M, dtype=float)
    return sparse.back_solve_transposed(G, np.ascontiguousarray(H_M.T)).T


def map_innovation(belief: FilterBelief, batch: MeasurementBatch, J=None):
    """``(K_bar, S, J, HG)`` of a map batch where ``HG = H_R Gamma + J``."""
    G = belief.factors[batch.submap]
    J = back_solve_J(G, batch.H_M) if J is None else J
    P = belief.P
    H = batch.H_R
    gam = belief.gammas.get(batch.submap)
    PH = P @ H.T
    if gam is None:
        K_bar = PH
        HG = J
        S = H @ PH + J @ J.T
    else:
        HGam = H @ gam
        K_bar = PH + gam @ J.T
        HG = HGam + J
        cross = HGam @ J.T
        S = H @ PH + cross + cross.T + J @ J.T
    S = S + batch.sigma ** 2 * np.eye(len(batch.r))
    return K_bar, 0.5 * (S + S.T), J, HG


def cskf_map_update(state: DeviceState, belief: FilterBelief, batch: MeasurementBatch, J=None):
    """Schmidt update against one sub-map through its Cholesky factor.

    The device state and ``P`` are updated, ``Gamma`` of the target sub-map
    becomes ``Gamma - K_bar S^-1 (H_R Gamma + J)`` and every other sub-map's
    ``Gamma_m - K_bar S^-1 H_R Gamma_m``. The map itself is not modified.
    """
    K_bar, S, J, HG = map_innovation(belief, batch, J)
    c = _chol(S)
    W = _cho_solve(c, K_bar.T)          # S^-1 K_bar^T
    dx = W.T @ batch.r
    belief.P = _symmetrize(belief.P - K_bar @ W)
    sid = batch.submap
    for m, g in list(belief.gammas.items()):
        if m != sid:
            belief.gammas[m] = g - W.T @ (batch.H_R @ g)
    belief.gammas[sid] = belief.gammas.get(sid, 0.0) - W.T @ HG
    state.apply_correction(dx)
    return state, belief


def scskf_map_update(state: DeviceState, belief: FilterBelief, batch: MeasurementBatch, J=None):
    """Update against sub-map ``batch.submap`` among several independent
    sub-maps. The algebra coincides with :func:`cskf_map_update`: the
    target's cross factor absorbs ``J`` and the others are multiplied by
    ``I - K_bar S^-1 H_R``."""
    return cskf_map_update(state, belief, batch, J)


def dense_map_update(state: DeviceState, belief: DenseJointBelief, batch: MeasurementBatch):
    d = belief.device_dim
    n = belief.P.shape[0]
    m = len(batch.r)
    H = np.zeros((m, n))
    H[:, :d] = batch.H_R
    if batch.H_M is not None:
        H[:, belief.map_slice(batch.submap)] = batch.H_M
    dx, belief.P = dense_skf_update(np.zeros(n), belief.P, H, batch.r, batch.sigma ** 2 * np.eye(m), d)
    state.apply_correction(dx[:d])
    return state, belief


def inflated_noise_update(state: DeviceState, belief, batch: MeasurementBatch, sigma_inflated):
    """Perfect-map update: ``H_M`` is ignored and the pixel noise inflated."""
    b = MeasurementBatch(batch.r, batch.H_R, sigma_inflated)
    apply_device_update(state, belief, b.H_R, b.r, sigma_inflated)
    return state, belief


# ---------------------------------------------------------------- transform initialization

def _init_core(P, H_p, H_tau, r, sigma, JJ, cond_max=1e8):
    """Shared algebra of the infinite-prior transform update.

    Returns ``(S_inf_inv, AiH, N_inv)`` with ``A = H' P H'^T + JJ + R``,
    ``AiH = A^-1 H_tau`` and ``N = H_tau^T A^-1 H_tau``.
    """
    m = len(r)
    A = H_p @ P @ H_p.T + JJ + sigma ** 2 * np.eye(m)
    A = 0.5 * (A + A.T)
    cA = _chol(A)
    AiH = _cho_solve(cA, H_tau)
    N = H_tau.T @ AiH
    N = 0.5 * (N + N.T)
    cond = np.linalg.cond(N)
    if not np.isfinite(cond) or cond > cond_max:
        raise DegenerateGeometry(f"transform information condition number {cond:.2e}")
    N_inv = np.linalg.inv(N)
    N_inv = 0.5 * (N_inv + N_inv.T)
    A_inv = _cho_solve(cA, np.eye(m))
    S_inv = A_inv - AiH @ N_inv @ AiH.T
    return 0.5 * (S_inv + S_inv.T), AiH, N_inv


def initialize_map_transform(state: DeviceState, belief, sid, tau0, H_R, H_tau, H_M, r, sigma, J=None):
    """Add the map-to-global transform of sub-map ``sid`` to the state with
    an uninformative prior and fuse the first mapped-feature batch.

    ``H_R`` (m x d) covers the current device state, ``H_tau`` (m x 4) the
    new transform linearized at ``tau0`` and ``H_M`` the sub-map. The new
    transform is appended at the end of the device state.
    """
    if len(r) < 4:
        raise InsufficientFeatures("need at least two mapped features")
    if sid in state.transforms:
        raise ValueError(f"transform {sid} already initialized")
    if isinstance(belief, DenseJointBelief):
        return _dense_initialize(state, belief, sid, tau0, H_R, H_tau, H_M, r, sigma)
    G = belief.factors[sid]
    if sid in belief.gammas and np.any(belief.gammas[sid]):
        raise ValueError("device already correlated with an uninitialized sub-map")
    J = back_solve_J(G, H_M) if J is None else J
    P = belief.P
    S_inv, AiH, N_inv = _init_core(P, H_R, H_tau, r, sigma, J @ J.T)
    PH = P @ H_R.T
    K = PH @ S_inv
    T = N_inv @ AiH.T                    # maps rows onto the transform
    dx = K @ r
    dtau = T @ r
    d = P.shape[0]
    P_new = np.zeros((d + 4, d + 4))
    P_new[:d, :d] = _symmetrize(P - K @ PH.T)
    P_new[:d, d:] = -PH @ AiH @ N_inv
    P_new[d:, :d] = P_new[:d, d:].T
    P_new[d:, d:] = N_inv
    gammas = {}
    for m, g in belief.gammas.items():
        if m == sid:
            continue
        HG = H_R @ g
        gammas[m] = np.vstack([g - K @ HG, -T @ HG])
    gammas[sid] = np.vstack([-K @ J, -T @ J])
    belief.P = P_new
    belief.gammas = gammas
    state.apply_correction(dx)
    state.transforms[sid] = np.asarray(tau0, dtype=float) + dtau
    return state, belief


def _dense_initialize(state, belief: DenseJointBelief, sid, tau0, H_R, H_tau, H_M, r, sigma):
    d = belief.device_dim
    n = belief.P.shape[0]
    Pz = belief.P
    m = len(r)
    Hz = np.zeros((m, n))
    Hz[:, :d] = H_R
    Hz[:, belief.map_slice(sid)] = H_M
    # the device is uncorrelated with this sub-map, so A = H' P' H'^T + JJ + R
    A = Hz @ Pz @ Hz.T + sigma ** 2 * np.eye(m)
    cA = _chol(0.5 * (A + A.T))
    AiH = _cho_solve(cA, H_tau)
    N = H_tau.T @ AiH
    cond = np.linalg.cond(N)
    if not np.isfinite(cond) or cond > 1e8:
        raise DegenerateGeometry(f"transform information condition number {cond:.2e}")
    N_inv = np.linalg.inv(0.5 * (N + N.T))
    S_inv = _cho_solve(cA, np.eye(m)) - AiH @ N_inv @ AiH.T
    PHz = Pz @ Hz.T
    K = PHz[:d] @ S_inv
    T = N_inv @ AiH.T
    Pn = Pz.copy()
    Pn[:d, :] = Pz[:d, :] - K @ PHz.T
    Pn[:, :d] = Pn[:d, :].T
    Pn[:d, :d] = 0.5 * (Pn[:d, :d] + Pn[:d, :d].T)
    tau_row = -T @ PHz.T                 # (4, n)
    out = np.zeros((n + 4, n + 4))
    idx = np.r_[np.arange(d), np.arange(d + 4, n + 4)]
    out[np.ix_(idx, idx)] = Pn
    out[d:d + 4, idx] = tau_row
    out[idx, d:d + 4] = tau_row.T
    out[d:d + 4, d:d + 4] = N_inv
    belief.P = out
    belief.device_dim = d + 4
    state.apply_correction(K @ r)
    state.transforms[sid] = np.asarray(tau0, dtype=float) + T @ r
    return state, belief


# ---------------------------------------------------------------- joint materialization

def joint_covariance(belief, order=None):
    """Dense joint covariance ``[device | maps]`` (tests and oracle only)."""
    if isinstance(belief, DenseJointBelief):
        return belief.P.copy()
    return DenseJointBelief.from_factorized(belief, order).P


def position_nees(state: DeviceState, belief, p_true):
    from .errors import SingularCovariance
    P = _device_P(belief)[3:6, 3:6]
    e = p_true - state.p
    try:
        c = sla.cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("position covariance is singular") from exc
    return float(e @ sla.cho_solve(c, e))


__all__ = [
    "DeviceState", "FilterBelief", "DenseJointBelief", "MeasurementBatch", "Clone",
    "propagate", "integrate_imu", "clone_and_marginalize", "marginalize_clone",
    "local_feature_update", "local_feature_rows", "triangulate", "apply_device_update",
    "cskf_map_update", "scskf_map_update", "dense_map_update", "inflated_noise_update",
    "initialize_map_transform", "dense_skf_update", "dense_ekf_update", "joint_covariance",
    "map_innovation", "back_solve_J", "position_nees", "MahalanobisReject",
]
