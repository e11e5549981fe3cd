"""Compiled IMU integration: RK4 on the nominal state with the error-state
transition matrix integrated alongside."""
import numpy as np
from numba import njit


@njit(cache=True)
def _rot(q):
    # RK4 stage quaternions are slightly off the unit sphere
    q = q / np.sqrt(np.sum(q * q))
    x, y, z, w = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - z * w)
    R[0, 2] = 2 * (x * z + y * w)
    R[1, 0] = 2 * (x * y + z * w)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - x * w)
    R[2, 0] = 2 * (x * z - y * w)
    R[2, 1] = 2 * (y * z + x * w)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def _qdot(q, w):
    # q' = 0.5 * (-w, 0) (x) q  for a global-to-body quaternion
    out = np.empty(4)
    qv0, qv1, qv2, qw = q[0], q[1], q[2], q[3]
    cx = w[1] * qv2 - w[2] * qv1
    cy = w[2] * qv0 - w[0] * qv2
    cz = w[0] * qv1 - w[1] * qv0
    out[0] = 0.5 * (-qw * w[0] - cx)
    out[1] = 0.5 * (-qw * w[1] - cy)
    out[2] = 0.5 * (-qw * w[2] - cz)
    out[3] = 0.5 * (w[0] * qv0 + w[1] * qv1 + w[2] * qv2)
    return out


@njit(cache=True)
def _skew(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True)
def _F(q, w, a):
    """Error-state dynamics over [dtheta, dp, dbg, dv, dba]."""
    F = np.zeros((15, 15))
    Ct = _rot(q).T
    F[0:3, 0:3] = -_skew(w)
    for i in range(3):
        F[i, 6 + i] = 1.0
        F[3 + i, 9 + i] = 1.0
    F[9:12, 0:3] = Ct @ _skew(a)
    F[9:12, 12:15] = -Ct
    return F


@njit(cache=True)
def _stage(q, v, w, a, g):
    qd = _qdot(q, w)
    vd = _rot(q).T @ a + g
    return qd, vd


@njit(cache=True)
def integrate(q, p, v, bg, ba, t, gyro, accel, gyro_mid, accel_mid, qc_diag, g):
    """Integrate samples ``t[0] .. t[-1]``; returns ``(q, p, v, Phi, Qd)``.

    ``gyro_mid``/``accel_mid`` are the rates halfway between consecutive
    samples. ``qc_diag`` holds the 15 diagonal entries of the continuous
    noise PSD in error-state order.
    """
    Phi_tot = np.eye(15)
    Q_tot = np.zeros((15, 15))
    Qc = np.diag(qc_diag)
    q = q.copy()
    p = p.copy()
    v = v.copy()
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        w0 = gyro[k] - bg
        w1 = gyro[k + 1] - bg
        a0 = accel[k] - ba
        a1 = accel[k + 1] - ba
        wm = gyro_mid[k] - bg
        am = accel_mid[k] - ba

        Phi = np.eye(15)
        qd1, vd1 = _stage(q, v, w0, a0, g)
        pd1 = v
        F1 = _F(q, w0, a0)
        dP1 = F1 @ Phi

        q2 = q + 0.5 * dt * qd1
        v2 = v + 0.5 * dt * vd1
        qd2, vd2 = _stage(q2, v2, wm, am, g)
        pd2 = v2
        dP2 = _F(q2, wm, am) @ (Phi + 0.5 * dt * dP1)

        q3 = q + 0.5 * dt * qd2
        v3 = v + 0.5 * dt * vd2
        qd3, vd3 = _stage(q3, v3, wm, am, g)
        pd3 = v3
        dP3 = _F(q3, wm, am) @ (Phi + 0.5 * dt * dP2)

        q4 = q + dt * qd3
        v4 = v + dt * vd3
        qd4, vd4 = _stage(q4, v4, w1, a1, g)
        pd4 = v4
        dP4 = _F(q4, w1, a1) @ (Phi + dt * dP3)

        q = q + dt / 6.0 * (qd1 + 2 * qd2 + 2 * qd3 + qd4)
        q = q / np.sqrt(np.sum(q * q))
        p = p + dt / 6.0 * (pd1 + 2 * pd2 + 2 * pd3 + pd4)
        v = v + dt / 6.0 * (vd1 + 2 * vd2 + 2 * vd3 + vd4)
        Phi = Phi + dt / 6.0 * (dP1 + 2 * dP2 + 2 * dP3 + dP4)

        Qd = 0.5 * dt * (Phi @ Qc @ Phi.T + Qc)
        Phi_tot = Phi @ Phi_tot
        Q_tot = Phi @ Q_tot @ Phi.T + Qd
    if q[3] < 0:
        q = -q
    return q, p, v, Phi_tot, 0.5 * (Q_tot + Q_tot.T)


def midpoints(x):
    """Values halfway between samples: four-point cubic inside, three-point
    quadratic at the two ends."""
    x = np.asarray(x, dtype=np.float64)
    mid = 0.5 * (x[:-1] + x[1:])
    if len(x) >= 3:
        mid[0] = (3.0 * x[0] + 6.0 * x[1] - x[2]) / 8.0
        mid[-1] = (3.0 * x[-1] + 6.0 * x[-2] - x[-3]) / 8.0
    if len(x) >= 4:
        mid[1:-1] = (-x[:-3] + 9.0 * x[1:-2] + 9.0 * x[2:-1] - x[3:]) / 16.0
    return mid
