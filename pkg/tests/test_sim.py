import numpy as np
import pytest

from cskf import sim
from cskf.errors import ConfigError
from cskf.geom import GRAVITY, quat_to_rot


def test_imu_readings_integrate_back_to_truth():
    spec = sim.TrajectorySpec(duration=4.0)
    traj = sim.Trajectory(spec)
    q, p, v = sim.integrate_true_rates(traj, 4.0, dt=1e-3)
    R, p_true, v_true, _, _ = traj.pose(4.0)
    assert np.allclose(p, p_true, atol=1e-6)
    assert np.allclose(v, v_true, atol=1e-6)
    assert np.allclose(quat_to_rot(q), R.T, atol=1e-7)


def test_static_accelerometer_reads_minus_gravity():
    spec = sim.TrajectorySpec(duration=2.0)
    traj = sim.Trajectory(spec)
    w, f = sim.imu_true_rates(traj, 0.5)
    R, _, _, a, _ = traj.pose(0.5)
    assert np.allclose(R @ f, a - GRAVITY)
    with pytest.raises(ValueError):
        sim.imu_true_rates(traj, 3.0)


def test_sessions_are_deterministic():
    world = sim.make_room_world(seed=3)
    spec = sim.TrajectorySpec(duration=2.0)
    a = sim.generate_session(spec, world, sim.NoiseConfig(), seed=7)
    b = sim.generate_session(spec, world, sim.NoiseConfig(), seed=7)
    assert np.array_equal(a.gyro, b.gyro) and np.array_equal(a.frames[5].uv, b.frames[5].uv)
    c = sim.generate_session(spec, world, sim.NoiseConfig(), seed=8)
    assert not np.array_equal(a.gyro, c.gyro)


def test_noise_free_observations_are_exact_projections():
    world = sim.make_room_world(seed=0)
    s = sim.generate_session(sim.TrajectorySpec(duration=1.0), world, sim.NoiseConfig.noise_free(), seed=0)
    fr = s.frames[3]
    k = fr.imu_index
    C = quat_to_rot(s.truth.q[k])
    y = (world.points[fr.ids] - s.truth.p[k]) @ C.T
    assert np.allclose(fr.uv[:, 0], 300 * y[:, 0] / y[:, 2] + 320)
    assert len(fr.ids) > 20


def test_mapping_session_only_sees_map_features():
    world = sim.make_room_world(seed=1, map_fraction=0.5)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=2.0), world, sim.NoiseConfig(), seed=1)
    seen = np.unique(np.concatenate([f.ids for f in ms.frames]))
    assert world.in_map_session[seen].all()
    assert len(ms.odom_rot) == len(ms.frames) - 1


def test_csv_round_trip(tmp_path):
    world = sim.make_room_world(seed=0)
    s = sim.generate_session(sim.TrajectorySpec(duration=1.0), world, sim.NoiseConfig(), seed=0)
    sim.write_session_csv(s, tmp_path)
    r = sim.read_session_csv(tmp_path)
    assert np.array_equal(r.gyro, s.gyro)
    assert np.array_equal(r.truth.p, s.truth.p)
    assert len(r.frames) == sum(len(f.ids) > 0 for f in s.frames)


def test_corridor_world_is_local():
    world = sim.make_corridor_world(20.0, seed=0)
    ms = sim.corridor_mapping_session(world, 20.0, sim.NoiseConfig(), seed=0)
    seen = [set(f.ids.tolist()) for f in ms.frames if len(f.ids) > 10]
    first, last = seen[0], seen[-1]
    assert first and last and not first & last


def test_config_errors():
    with pytest.raises(ConfigError):
        sim.TrajectorySpec(kind="spiral")
    with pytest.raises(ConfigError):
        sim.TrajectorySpec(imu_rate=205.0, cam_rate=10.0)
    with pytest.raises(ConfigError):
        sim.make_room_world(n_features=0)
