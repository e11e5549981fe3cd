"""Seedable synthetic worlds, trajectories, IMU streams and camera
observations for mapping and localization sessions.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError
from .geom import GRAVITY, CameraModel, quat_exp, quat_multiply, quat_to_rot, rot_to_quat, rot_z, so3_exp

# camera axes (x right, y down, z forward) expressed in a vehicle frame
# (x forward, y left, z up)
R_VEHICLE_CAM = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "lissajous"
    room: tuple = (-5.0, 5.0, -4.0, 4.0, 0.0, 3.0)
    duration: float = 25.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    revisit_count: int = 3
    variant: int = 0

    def __post_init__(self):
        if self.kind not in ("lissajous", "waypoint_spline"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.revisit_count < 1:
            raise ConfigError("revisit_count must be >= 1")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of cam_rate")


@dataclass(frozen=True)
class WorldFeatures:
    points: np.ndarray
    ids: np.ndarray
    radius: np.ndarray
    # features that existed when the map was recorded
    in_map_session: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ConfigError("feature ids must be unique")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class NoiseConfig:
    gyro_noise: float = 1e-3      # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2     # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5       # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4      # m/s^3/sqrt(Hz)
    pixel_sigma: float = 1.0
    outlier_rate: float = 0.0
    # keyframe-to-keyframe motion constraints of the mapping session
    odom_rot_sigma: float = 2e-3
    odom_pos_sigma: float = 1e-2
    tilt_sigma: float = 2e-3

    @classmethod
    def noise_free(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class FeatureObservation:
    t: float
    feature_id: int
    uv: np.ndarray
    is_outlier: bool


@dataclass
class Frame:
    t: float
    imu_index: int
    ids: np.ndarray
    uv: np.ndarray
    is_outlier: np.ndarray


@dataclass
class GroundTruth:
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray


@dataclass
class Session:
    spec: TrajectorySpec
    truth: GroundTruth
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    frames: list

    def imu_samples(self):
        for t, g, a in zip(self.imu_t, self.gyro, self.accel):
            yield ImuSample(float(t), g, a)

    def observations(self):
        for fr in self.frames:
            for fid, uv, out in zip(fr.ids, fr.uv, fr.is_outlier):
                yield FeatureObservation(fr.t, int(fid), uv, bool(out))


@dataclass
class MappingSession:
    """Keyframe poses, pixel observations and motion constraints for mapping."""

    t: np.ndarray
    q: np.ndarray               # true global-to-IMU rotations at keyframes
    p: np.ndarray
    frames: list
    odom_rot: np.ndarray        # measured C_{i+1} C_i^T
    odom_pos: np.ndarray        # measured C_i (p_{i+1} - p_i)
    tilt: np.ndarray            # measured C_i @ (0, 0, 1)
    noise: NoiseConfig = field(default_factory=NoiseConfig)


class Trajectory:
    """Analytic device trajectory inside a room."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        x0, x1, y0, y1, z0, z1 = spec.room
        self.center = np.array([(x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2])
        half = np.array([(x1 - x0) / 2, (y1 - y0) / 2, (z1 - z0) / 2])
        v = spec.variant
        rng = np.random.default_rng(1000 + v)
        self.amp = half * np.array([0.35, 0.35, 0.15]) * (0.8 + 0.4 * rng.random(3))
        T = spec.duration
        self.freq = 2 * np.pi * np.array([1.0 + v % 2, 1.5 + 0.5 * (v % 3), 2.0]) / T
        self.phase = 2 * np.pi * rng.random(3)
        self.yaw0 = 2 * np.pi * rng.random()
        self.yaw_rate = (1 if v % 2 == 0 else -1) * 2 * np.pi * spec.revisit_count / T
        self.pitch_amp, self.pitch_w = 0.12, 2 * np.pi * 0.3
        self.roll_amp, self.roll_w = 0.06, 2 * np.pi * 0.45
        if spec.kind == "waypoint_spline":
            n_wp = 6 + 2 * spec.revisit_count
            s = np.linspace(0.0, T, n_wp + 1)
            base = rng.uniform(-1, 1, size=(n_wp, 3)) * half * np.array([0.45, 0.45, 0.2])
            wp = np.vstack([base, base[:1]]) + self.center
            self._spline = CubicSpline(s, wp, bc_type="periodic")

    # position and its first two derivatives
    def _position(self, t):
        if self.spec.kind == "waypoint_spline":
            return self._spline(t), self._spline(t, 1), self._spline(t, 2)
        arg = self.freq * t + self.phase
        p = self.center + self.amp * np.sin(arg)
        v = self.amp * self.freq * np.cos(arg)
        a = -self.amp * self.freq**2 * np.sin(arg)
        return p, v, a

    def _euler(self, t):
        yaw = self.yaw0 + self.yaw_rate * t
        pitch = self.pitch_amp * np.sin(self.pitch_w * t)
        roll = self.roll_amp * np.sin(self.roll_w * t)
        rates = (self.yaw_rate,
                 self.pitch_amp * self.pitch_w * np.cos(self.pitch_w * t),
                 self.roll_amp * self.roll_w * np.cos(self.roll_w * t))
        return (yaw, pitch, roll), rates

    def pose(self, t):
        """Returns ``(R_world_body, p, v, a, omega_body)``."""
        (yaw, pitch, roll), (dyaw, dpitch, droll) = self._euler(t)
        Ry = _rot_y(pitch)
        Rx = _rot_x(roll)
        R_wv = rot_z(yaw) @ Ry @ Rx
        R_wb = R_wv @ R_VEHICLE_CAM
        w_v = Rx.T @ Ry.T @ np.array([0.0, 0.0, dyaw]) + Rx.T @ np.array([0.0, dpitch, 0.0]) + np.array([droll, 0.0, 0.0])
        w_b = R_VEHICLE_CAM.T @ w_v
        p, v, a = self._position(t)
        return R_wb, p, v, a, w_b


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def imu_true_rates(traj: Trajectory, t):
    """Noise-free gyro and accelerometer readings at time ``t``."""
    if t < -1e-12 or t > traj.spec.duration + 1e-9:
        raise ValueError(f"t={t} outside [0, {traj.spec.duration}]")
    R_wb, _, _, a, w_b = traj.pose(t)
    return w_b, R_wb.T @ (a - GRAVITY)


def make_room_world(room=TrajectorySpec.room, n_features=250, seed=0, map_fraction=0.5,
                    radius=(5.0, 9.0)):
    """Random points on the four walls of the room."""
    if n_features <= 0:
        raise ConfigError("world needs at least one feature")
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1, z0, z1 = room
    lengths = np.array([x1 - x0, y1 - y0, x1 - x0, y1 - y0])
    wall = rng.choice(4, size=n_features, p=lengths / lengths.sum())
    u = rng.random(n_features)
    z = z0 + (z1 - z0) * rng.random(n_features)
    pts = np.empty((n_features, 3))
    for k in range(n_features):
        if wall[k] == 0:
            pts[k] = (x0 + u[k] * (x1 - x0), y0, z[k])
        elif wall[k] == 1:
            pts[k] = (x1, y0 + u[k] * (y1 - y0), z[k])
        elif wall[k] == 2:
            pts[k] = (x0 + u[k] * (x1 - x0), y1, z[k])
        else:
            pts[k] = (x0, y0 + u[k] * (y1 - y0), z[k])
    rad = rng.uniform(radius[0], radius[1], size=n_features)
    in_map = rng.random(n_features) < map_fraction
    return WorldFeatures(pts, np.arange(n_features, dtype=np.int64), rad, in_map)


def visible(cam: CameraModel, C, p, world: WorldFeatures, mask=None):
    """Indices of world points inside the frustum and visibility radius."""
    y = (world.points - p) @ C.T
    dist = np.linalg.norm(world.points - p, axis=1)
    ok = (y[:, 2] > 0.2) & (dist < world.radius)
    if mask is not None:
        ok &= mask
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * y[:, 0] / y[:, 2] + cam.cx
        v = cam.fy * y[:, 1] / y[:, 2] + cam.cy
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(ok)
    return idx, np.column_stack([u[idx], v[idx]])


def _observe(cam, C, p, world, noise, rng, mask=None, t=0.0, imu_index=0):
    idx, uv = visible(cam, C, p, world, mask)
    if noise.pixel_sigma > 0:
        uv = uv + noise.pixel_sigma * rng.standard_normal(uv.shape)
    out = np.zeros(len(idx), dtype=bool)
    if noise.outlier_rate > 0 and len(idx):
        out = rng.random(len(idx)) < noise.outlier_rate
        k = int(out.sum())
        uv[out] = rng.random((k, 2)) * [cam.width, cam.height]
    return Frame(t, imu_index, world.ids[idx].copy(), uv, out)


def generate_session(spec: TrajectorySpec, world: WorldFeatures, noise: NoiseConfig, seed,
                     cam: CameraModel | None = None, initial_bias=(0.0, 0.0)):
    """Ground truth, IMU stream and per-frame observations of one session."""
    if len(world) == 0:
        raise ConfigError("empty world")
    cam = cam or CameraModel()
    traj = Trajectory(spec)
    rng = np.random.default_rng(seed)
    n_imu = int(round(spec.duration * spec.imu_rate)) + 1
    dt = 1.0 / spec.imu_rate
    t = np.arange(n_imu) * dt
    step = int(round(spec.imu_rate / spec.cam_rate))

    q = np.empty((n_imu, 4))
    p = np.empty((n_imu, 3))
    v = np.empty((n_imu, 3))
    gyro = np.empty((n_imu, 3))
    accel = np.empty((n_imu, 3))
    bg = np.empty((n_imu, 3))
    ba = np.empty((n_imu, 3))
    b_g = rng.standard_normal(3) * initial_bias[0]
    b_a = rng.standard_normal(3) * initial_bias[1]
    sg = noise.gyro_noise / np.sqrt(dt)
    sa = noise.accel_noise / np.sqrt(dt)
    frames = []
    for k in range(n_imu):
        R_wb, pk, vk, ak, wk = traj.pose(t[k])
        C = R_wb.T
        q[k] = rot_to_quat(C)
        p[k], v[k] = pk, vk
        bg[k], ba[k] = b_g, b_a
        gyro[k] = wk + b_g + sg * rng.standard_normal(3)
        accel[k] = C @ (ak - GRAVITY) + b_a + sa * rng.standard_normal(3)
        if k % step == 0:
            frames.append(_observe(cam, C, pk, world, noise, rng, t=t[k], imu_index=k))
        b_g = b_g + noise.gyro_walk * np.sqrt(dt) * rng.standard_normal(3)
        b_a = b_a + noise.accel_walk * np.sqrt(dt) * rng.standard_normal(3)
    truth = GroundTruth(t, q, p, v, bg, ba)
    return Session(spec, truth, t.copy(), gyro, accel, frames)


def generate_mapping_session(spec: TrajectorySpec, world: WorldFeatures, noise: NoiseConfig, seed,
                             cam: CameraModel | None = None):
    """Keyframes at ``spec.cam_rate`` with pixel observations of the features
    present at mapping time, plus noisy relative-motion and tilt constraints
    standing in for pre-integrated inertial data."""
    if len(world) == 0:
        raise ConfigError("empty world")
    cam = cam or CameraModel()
    traj = Trajectory(spec)
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration * spec.cam_rate)) + 1
    t = np.arange(n) / spec.cam_rate
    q = np.empty((n, 4))
    p = np.empty((n, 3))
    Cs = []
    frames = []
    for k in range(n):
        R_wb, pk, _, _, _ = traj.pose(t[k])
        C = R_wb.T
        Cs.append(C)
        q[k] = rot_to_quat(C)
        p[k] = pk
        frames.append(_observe(cam, C, pk, world, noise, rng, mask=world.in_map_session, t=t[k], imu_index=k))
    odom_rot = np.empty((n - 1, 3, 3))
    odom_pos = np.empty((n - 1, 3))
    for k in range(n - 1):
        rel = Cs[k + 1] @ Cs[k].T
        odom_rot[k] = so3_exp(noise.odom_rot_sigma * rng.standard_normal(3)) @ rel
        odom_pos[k] = Cs[k] @ (p[k + 1] - p[k]) + noise.odom_pos_sigma * rng.standard_normal(3)
    tilt = np.array([C @ np.array([0.0, 0.0, 1.0]) for C in Cs])
    tilt = tilt + noise.tilt_sigma * rng.standard_normal(tilt.shape)
    return MappingSession(t, q, p, frames, odom_rot, odom_pos, tilt, noise)


def make_corridor_world(length, width=2.4, height=2.5, density=8.0, seed=0, radius=(3.0, 4.0)):
    """Points on the two side walls of a corridor along +x; ``density`` is
    features per metre per wall. Short visibility radii keep co-visibility
    local, so map Hessians stay banded as the corridor grows."""
    if length <= 0 or density <= 0:
        raise ConfigError("corridor needs positive length and density")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(2 * density * length)))
    side = rng.integers(0, 2, size=n)
    pts = np.column_stack([length * rng.random(n), np.where(side == 0, -width / 2, width / 2),
                           height * rng.random(n)])
    rad = rng.uniform(radius[0], radius[1], size=n)
    return WorldFeatures(pts, np.arange(n, dtype=np.int64), rad, np.ones(n, dtype=bool))


def corridor_mapping_session(world: WorldFeatures, length, noise: NoiseConfig, seed, spacing=0.25,
                             cam: CameraModel | None = None):
    """Keyframes every ``spacing`` metres down the corridor with the camera
    sweeping between the two walls."""
    cam = cam or CameraModel()
    rng = np.random.default_rng(seed)
    xs = np.arange(0.0, length + 1e-9, spacing)
    n = len(xs)
    if n < 2:
        raise ConfigError("corridor shorter than two keyframes")
    Cs, q, p, frames = [], np.empty((n, 4)), np.empty((n, 3)), []
    for k, x in enumerate(xs):
        yaw = 0.8 * np.sin(2 * np.pi * k / 10.0)
        R_wb = rot_z(yaw) @ _rot_y(0.05 * np.sin(0.7 * k)) @ _rot_x(0.03 * np.cos(0.9 * k)) @ R_VEHICLE_CAM
        C = R_wb.T
        pk = np.array([x, 0.3 * np.sin(0.4 * k), 1.2 + 0.1 * np.sin(0.3 * k)])
        Cs.append(C)
        q[k] = rot_to_quat(C)
        p[k] = pk
        frames.append(_observe(cam, C, pk, world, noise, rng, t=k / 10.0, imu_index=k))
    odom_rot = np.empty((n - 1, 3, 3))
    odom_pos = np.empty((n - 1, 3))
    for k in range(n - 1):
        odom_rot[k] = so3_exp(noise.odom_rot_sigma * rng.standard_normal(3)) @ Cs[k + 1] @ Cs[k].T
        odom_pos[k] = Cs[k] @ (p[k + 1] - p[k]) + noise.odom_pos_sigma * rng.standard_normal(3)
    tilt = np.array([C[:, 2] for C in Cs]) + noise.tilt_sigma * rng.standard_normal((n, 3))
    return MappingSession(np.arange(n) / 10.0, q, p, frames, odom_rot, odom_pos, tilt, noise)


def integrate_true_rates(traj: Trajectory, t_end, dt=1e-3):
    """RK4 integration of noise-free IMU rates from the true initial state."""
    R_wb, p, v, _, _ = traj.pose(0.0)
    q = rot_to_quat(R_wb.T)

    def deriv(t, q, v):
        w, f = imu_true_rates(traj, t)
        C = quat_to_rot(q)
        # C = global-to-body: dC/dt = -[w]x C
        dq = 0.5 * quat_multiply(np.r_[-w, 0.0], q)
        return dq, C.T @ f + GRAVITY

    n = int(round(t_end / dt))
    t = 0.0
    for _ in range(n):
        k1q, k1v = deriv(t, q, v)
        k1p = v
        k2q, k2v = deriv(t + dt / 2, q + dt / 2 * k1q, v + dt / 2 * k1v)
        k2p = v + dt / 2 * k1v
        k3q, k3v = deriv(t + dt / 2, q + dt / 2 * k2q, v + dt / 2 * k2v)
        k3p = v + dt / 2 * k2v
        k4q, k4v = deriv(t + dt, q + dt * k3q, v + dt * k3v)
        k4p = v + dt * k3v
        q = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        q = q / np.linalg.norm(q)
        t += dt
    return q, p, v


def write_session_csv(session: Session, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "imu.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gx", "gy", "gz", "ax", "ay", "az"])
        for t, g, a in zip(session.imu_t, session.gyro, session.accel):
            w.writerow([repr(float(t)), *map(repr, map(float, g)), *map(repr, map(float, a))])
    with open(os.path.join(out_dir, "obs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "feature_id", "u", "v", "is_outlier"])
        for fr in session.frames:
            for fid, uv, out in zip(fr.ids, fr.uv, fr.is_outlier):
                w.writerow([repr(float(fr.t)), int(fid), repr(float(uv[0])), repr(float(uv[1])), int(out)])
    tr = session.truth
    with open(os.path.join(out_dir, "truth.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "qx", "qy", "qz", "qw", "px", "py", "pz", "vx", "vy", "vz"])
        for k in range(len(tr.t)):
            w.writerow([repr(float(tr.t[k])), *(repr(float(x)) for x in np.r_[tr.q[k], tr.p[k], tr.v[k]])])


def read_session_csv(in_dir):
    """Inverse of :func:`write_session_csv` (spec is not stored)."""
    imu = np.loadtxt(os.path.join(in_dir, "imu.csv"), delimiter=",", skiprows=1, ndmin=2)
    obs = np.loadtxt(os.path.join(in_dir, "obs.csv"), delimiter=",", skiprows=1, ndmin=2)
    tr = np.loadtxt(os.path.join(in_dir, "truth.csv"), delimiter=",", skiprows=1, ndmin=2)
    frames = []
    if obs.size:
        for t in np.unique(obs[:, 0]):
            rows = obs[obs[:, 0] == t]
            k = int(np.argmin(np.abs(imu[:, 0] - t)))
            frames.append(Frame(float(t), k, rows[:, 1].astype(np.int64), rows[:, 2:4].copy(), rows[:, 4] > 0))
    zeros = np.zeros((len(tr), 3))
    truth = GroundTruth(tr[:, 0], tr[:, 1:5], tr[:, 5:8], tr[:, 8:11], zeros, zeros.copy())
    return Session(None, truth, imu[:, 0], imu[:, 1:4], imu[:, 4:7], frames)


def perturb_quat(q, theta):
    """Left-perturb ``q`` by rotation vector ``theta``."""
    return quat_multiply(quat_exp(theta), q)
