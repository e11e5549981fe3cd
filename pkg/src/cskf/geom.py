"""Rotation algebra, 4-d.o.f. map transforms, pinhole projection and the
analytic measurement Jacobians.

Conventions
-----------
* Quaternions are Hamilton, stored ``(x, y, z, w)``. A device orientation
  quaternion ``q`` encodes ``C = rot(q)``, the rotation taking global-frame
  vectors into the IMU frame.
* Orientation errors are left perturbations: ``C = Exp(dtheta) @ C_hat``,
  i.e. ``q = dq(dtheta) (x) q_hat``.
* The map-to-global rotation is a pure rotation about ``z`` (gravity).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

Z_MIN = 1e-4
GRAVITY = np.array([0.0, 0.0, -9.81])
E_Z = np.array([0.0, 0.0, 1.0])


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps comparisons simple
    return -q if q[3] < 0 else q


def quat_to_rot(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def quat_exp(theta):
    """Unit quaternion of the rotation vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta)
    if a < 1e-12:
        return quat_normalize(np.r_[0.5 * theta, 1.0])
    return np.r_[np.sin(0.5 * a) * theta / a, np.cos(0.5 * a)]


def so3_exp(theta):
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta)
    K = skew(theta)
    if a < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(a) / a * K + (1 - np.cos(a)) / a**2 * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=float)
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    a = np.arccos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if a < 1e-8:
        return 0.5 * w
    if np.pi - a < 1e-6:
        # near pi: take the axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        axis /= np.linalg.norm(axis)
        return a * axis
    return a / (2.0 * np.sin(a)) * w


def so3_right_jacobian_inv(phi):
    a = np.linalg.norm(phi)
    K = skew(phi)
    if a < 1e-8:
        return np.eye(3) + 0.5 * K
    return np.eye(3) + 0.5 * K + (1.0 / a**2 - (1 + np.cos(a)) / (2 * a * np.sin(a))) * K @ K


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R_world_body):
    """Heading of a body-to-world rotation (z-y-x Euler yaw)."""
    return float(np.arctan2(R_world_body[1, 0], R_world_body[0, 0]))


def yaw_jacobian(C):
    """d yaw(C^T) / d dtheta for the left perturbation of ``C`` (global-to-body)."""
    R = C.T
    r00, r10 = R[0, 0], R[1, 0]
    den = r00 * r00 + r10 * r10
    out = np.empty(3)
    for i in range(3):
        # C^T Exp(-dtheta) -> dR = -C^T [e_i x]
        dR = -R @ skew(np.eye(3)[i])
        out[i] = (r00 * dR[1, 0] - r10 * dR[0, 0]) / den
    return out


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion ``(x, y, z, w)``; renormalized on construction."""

    xyzw: tuple

    def __post_init__(self):
        object.__setattr__(self, "xyzw", tuple(quat_normalize(self.xyzw)))

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0, 0.0, 1.0))

    @classmethod
    def from_rotation_vector(cls, theta):
        return cls(tuple(quat_exp(theta)))

    def __matmul__(self, other):
        return UnitQuaternion(tuple(quat_multiply(self.xyzw, other.xyzw)))

    def as_array(self):
        return np.array(self.xyzw)

    def rotation_matrix(self):
        return quat_to_rot(self.xyzw)


@dataclass(frozen=True)
class MapTransform4DoF:
    """Yaw about gravity and translation taking map-frame points into G."""

    yaw: float
    translation: np.ndarray

    def rotation(self):
        return rot_z(self.yaw)

    def apply(self, p_map):
        return np.asarray(self.translation) + rot_z(self.yaw) @ np.asarray(p_map)

    def inverse(self):
        R = rot_z(-self.yaw)
        return MapTransform4DoF(-self.yaw, -R @ np.asarray(self.translation))

    def as_vector(self):
        return np.r_[self.yaw, self.translation]

    @classmethod
    def from_vector(cls, v):
        return cls(float(v[0]), np.array(v[1:4], dtype=float))


@dataclass(frozen=True)
class CameraModel:
    fx: float = 300.0
    fy: float = 300.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    sigma: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.sigma <= 0:
            raise ValueError("focal lengths and pixel sigma must be positive")

    def in_image(self, uv):
        uv = np.asarray(uv)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


def project(cam, p_cam):
    """Pinhole projection of a camera-frame point to pixels."""
    x, y, z = p_cam
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z:.3g} <= {Z_MIN}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_jacobian(cam, p_cam):
    x, y, z = p_cam
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z:.3g} <= {Z_MIN}")
    iz = 1.0 / z
    return np.array([[cam.fx * iz, 0.0, -cam.fx * x * iz * iz],
                     [0.0, cam.fy * iz, -cam.fy * y * iz * iz]])


def mapped_feature_predict(q_dev, p_dev, transform, q_anchor, p_anchor, f_anchor):
    """Feature position in the current IMU frame.

    ``q_dev``/``p_dev`` is the device pose in G, ``transform`` the map-to-G
    4-d.o.f. transform, ``q_anchor``/``p_anchor`` the anchor pose in the
    map frame (``q_anchor`` encodes the map-to-anchor rotation) and
    ``f_anchor`` the feature in the anchor frame.
    """
    C = quat_to_rot(q_dev)
    Ca = quat_to_rot(q_anchor)
    m = np.asarray(p_anchor) + Ca.T @ np.asarray(f_anchor)
    g = np.asarray(transform.translation) + rot_z(transform.yaw) @ m
    return C @ (g - np.asarray(p_dev))


def mapped_feature_jacobians(cam, q_dev, p_dev, transform, q_anchor, p_anchor, f_anchor):
    """Residual prediction and block Jacobians of a mapped-feature pixel.

    Returns ``(z_hat, H_R, H_M)`` where ``H_R`` is 2x10 over
    ``[dtheta_dev, dp_dev, dyaw, dp_map]`` and ``H_M`` is 2x9 over
    ``[dtheta_anchor, dp_anchor, df_anchor]``.
    """
    C = quat_to_rot(q_dev)
    Ca = quat_to_rot(q_anchor)
    Rz = rot_z(transform.yaw)
    f = np.asarray(f_anchor, dtype=float)
    m = np.asarray(p_anchor) + Ca.T @ f
    Rm = Rz @ m
    y = C @ (np.asarray(transform.translation) + Rm - np.asarray(p_dev))
    Pi = project_jacobian(cam, y)
    z_hat = project(cam, y)

    H_R = np.empty((2, 10))
    H_R[:, 0:3] = Pi @ (-skew(y))
    H_R[:, 3:6] = Pi @ (-C)
    H_R[:, 6] = Pi @ (C @ np.cross(E_Z, Rm))
    H_R[:, 7:10] = Pi @ C

    CRz = C @ Rz
    H_M = np.empty((2, 9))
    H_M[:, 0:3] = Pi @ (CRz @ Ca.T @ skew(f))
    H_M[:, 3:6] = Pi @ CRz
    H_M[:, 6:9] = Pi @ (CRz @ Ca.T)
    return z_hat, H_R, H_M


def local_feature_jacobians(cam, clone_quats, clone_positions, p_f):
    """Stacked Jacobians of one feature seen from several clone poses.

    Returns ``(z_hat, H_poses, H_f, ok)``: ``H_poses[i]`` is the 2x6 block
    over ``[dtheta_i, dp_i]`` of observation ``i``, ``H_f`` is (2n x 3).
    Observations behind the camera are flagged ``ok[i] = False`` and carry
    zero rows.
    """
    n = len(clone_quats)
    z_hat = np.zeros((n, 2))
    H_poses = np.zeros((n, 2, 6))
    H_f = np.zeros((2 * n, 3))
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        C = quat_to_rot(clone_quats[i])
        y = C @ (np.asarray(p_f) - clone_positions[i])
        try:
            Pi = project_jacobian(cam, y)
        except BehindCamera:
            ok[i] = False
            continue
        z_hat[i] = project(cam, y)
        H_poses[i, :, 0:3] = Pi @ (-skew(y))
        H_poses[i, :, 3:6] = Pi @ (-C)
        H_f[2 * i:2 * i + 2] = Pi @ C
    return z_hat, H_poses, H_f, ok
