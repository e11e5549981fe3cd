import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cskf import bench
from cskf.errors import BehindCamera
from cskf.geom import (CameraModel, MapTransform4DoF, UnitQuaternion, project, quat_exp, quat_multiply,
                       quat_to_rot, rot_to_quat, rot_z, so3_exp, so3_log, yaw_jacobian, yaw_of)

vec3 = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)


@settings(max_examples=50, deadline=None)
@given(vec3)
def test_so3_log_inverts_exp(theta):
    if np.linalg.norm(theta) > np.pi - 1e-3:
        theta = theta / np.linalg.norm(theta) * (np.pi - 1e-3)
    assert np.allclose(so3_log(so3_exp(theta)), theta, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(vec3)
def test_quaternion_matches_rotation_matrix(theta):
    q = quat_exp(theta)
    assert np.allclose(quat_to_rot(q), so3_exp(theta), atol=1e-12)
    assert np.allclose(quat_to_rot(rot_to_quat(so3_exp(theta))), so3_exp(theta), atol=1e-12)


def test_quaternion_product_composes_rotations():
    rng = np.random.default_rng(0)
    a, b = quat_exp(rng.standard_normal(3)), quat_exp(rng.standard_normal(3))
    assert np.allclose(quat_to_rot(quat_multiply(a, b)), quat_to_rot(a) @ quat_to_rot(b))
    assert UnitQuaternion((0.0, 0.0, 0.0, 2.0)).xyzw == (0.0, 0.0, 0.0, 1.0)


def test_transform_inverse_and_vector_round_trip():
    T = MapTransform4DoF(0.7, np.array([1.0, -2.0, 0.5]))
    m = np.array([0.3, 0.2, 1.0])
    assert np.allclose(T.inverse().apply(T.apply(m)), m)
    assert np.allclose(T.apply(m), rot_z(0.7) @ m + T.translation)
    assert MapTransform4DoF.from_vector(T.as_vector()).yaw == pytest.approx(0.7)


def test_yaw_jacobian_finite_difference():
    rng = np.random.default_rng(3)
    C = so3_exp(rng.standard_normal(3))
    J = yaw_jacobian(C)
    eps = 1e-6
    num = np.array([(yaw_of((so3_exp(eps * e) @ C).T) - yaw_of((so3_exp(-eps * e) @ C).T)) / (2 * eps)
                    for e in np.eye(3)])
    assert np.allclose(J, num, atol=1e-8)


def test_projection_rejects_points_behind():
    cam = CameraModel()
    assert np.allclose(project(cam, np.array([0.0, 0.0, 2.0])), [cam.cx, cam.cy])
    with pytest.raises(BehindCamera):
        project(cam, np.array([0.0, 0.0, -1.0]))


def test_measurement_jacobians_against_finite_differences():
    rng = np.random.default_rng(4)
    cam = CameraModel()
    for _ in range(20):
        a, b = bench.check_mapped_jacobians(rng, cam)
        assert a < 1e-6 and b < 1e-6
        assert bench.check_local_jacobians(rng, cam) < 1e-6
