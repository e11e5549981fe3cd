import mpmath as mp
import numpy as np
import pytest
import scipy.sparse as sp

from cskf import bench, sparse
from cskf import filter as flt
from cskf.errors import InsufficientFeatures, NonMonotonicTimestamps, SingularInnovation
from cskf.sim import NoiseConfig


def test_skf_scalar_hand_case():
    P = np.array([[1.0, 0.5], [0.5, 1.0]])
    H = np.array([[1.0, 1.0]])
    # K_bar = P H^T = [1.5, 1.5], S = 4; only the first state is updated
    x, P_skf = flt.dense_skf_update(np.zeros(2), P, H, np.array([2.0]), np.eye(1), 1)
    assert np.allclose(P_skf, P - np.array([[0.5625, 0.5625], [0.5625, 0.0]]), atol=1e-14)
    assert np.allclose(x, [0.75, 0.0])
    _, P_ekf = flt.dense_ekf_update(np.zeros(2), P, H, np.array([2.0]), np.eye(1))
    assert np.linalg.eigvalsh(P_skf - P_ekf).min() >= -1e-12


def test_skf_minus_ekf_is_gain_outer_product():
    rng = np.random.default_rng(0)
    n, d, k = 9, 4, 3
    A = rng.standard_normal((n, n))
    P = A @ A.T + np.eye(n)
    H = rng.standard_normal((k, n))
    R = np.eye(k)
    _, Ps = flt.dense_skf_update(np.zeros(n), P, H, np.zeros(k), R, d)
    _, Pe = flt.dense_ekf_update(np.zeros(n), P, H, np.zeros(k), R)
    S = H @ P @ H.T + R
    Kb = P @ H.T
    Kb[:d] = 0.0
    assert np.allclose(Ps - Pe, Kb @ np.linalg.solve(S, Kb.T), atol=1e-10)
    assert np.array_equal(Ps[d:, d:], P[d:, d:])


def test_ekf_zero_jacobian_is_identity():
    P = np.diag([1.0, 2.0])
    x, Pn = flt.dense_ekf_update(np.ones(2), P, np.zeros((1, 2)), np.array([5.0]), np.eye(1))
    assert np.allclose(x, 1.0) and np.allclose(Pn, P)
    with pytest.raises(SingularInnovation):
        flt.dense_ekf_update(np.zeros(2), P, np.zeros((1, 2)), np.zeros(1), np.zeros((1, 1)))


@pytest.mark.parametrize("seed", range(100))
def test_skf_dominates_ekf(seed):
    assert bench.skf_vs_ekf_gap(seed) >= -1e-9


def test_transition_matches_finite_difference():
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert bench.check_transition(rng) < 1e-4


def test_noise_free_propagation_leaves_gamma_zero():
    rng = np.random.default_rng(2)
    st = bench._random_device(rng, 2)
    G = sparse.cholesky(sp.identity(6, format="csc"))
    P0 = 0.01 * np.eye(st.dim)
    fb = flt.FilterBelief(P0.copy(), {0: G}, {0: np.zeros((st.dim, 6))})
    t = np.linspace(0, 0.1, 21)
    gyro = np.tile([0.1, 0.0, 0.2], (21, 1))
    acc = np.tile([0.0, 0.0, 9.81], (21, 1))
    Phi, Q = flt.integrate_imu(st.copy(), t, gyro, acc, NoiseConfig.noise_free())
    flt.propagate(st, fb, t, gyro, acc, NoiseConfig.noise_free())
    Pf, _ = flt.device_transition(st, Phi, Q)
    assert np.allclose(Q, 0.0)
    assert np.allclose(fb.P, Pf @ P0 @ Pf.T, atol=1e-14)
    assert not fb.gammas[0].any()
    with pytest.raises(NonMonotonicTimestamps):
        flt.integrate_imu(st, t[::-1], gyro, acc, NoiseConfig())


def test_clone_copies_pose_block_and_marginalization_undoes_it():
    rng = np.random.default_rng(3)
    st = bench._random_device(rng, 1)
    A = rng.standard_normal((st.dim, st.dim))
    fb = flt.FilterBelief(A @ A.T, {})
    before = fb.P.copy()
    flt.clone_and_marginalize(st, fb, window=5)
    o = st.clone_offset(st.n_clones - 1)
    assert np.array_equal(fb.P[o:o + 6, o:o + 6], before[:6, :6])
    flt.marginalize_clone(st, fb, st.n_clones - 1)
    assert np.array_equal(fb.P, before)


@pytest.mark.parametrize("seed", range(5))
def test_factorized_operations_match_dense_oracle(seed):
    worst_P, worst_x = bench.oracle_scenario(seed)
    assert worst_P < 1e-8 and worst_x < 1e-8


def test_zero_device_jacobian_leaves_device_unchanged():
    rng = np.random.default_rng(4)
    st = bench._random_device(rng, 0)
    G = sparse.cholesky(bench._random_spd_sparse(12, rng))
    fb = flt.FilterBelief(0.1 * np.eye(st.dim), {0: G})
    st.transforms[0] = np.zeros(4)
    fb.P = 0.1 * np.eye(st.dim)
    before = (st.p.copy(), fb.P.copy())
    H_M = rng.standard_normal((4, 12))
    batch = flt.MeasurementBatch(rng.standard_normal(4), np.zeros((4, st.dim)), 1.0, H_M, 0)
    flt.cskf_map_update(st, fb, batch)
    assert np.array_equal(st.p, before[0]) and np.allclose(fb.P, before[1])


def test_scskf_single_map_equals_cskf():
    rng = np.random.default_rng(5)
    st = bench._random_device(rng, 1)
    st.transforms[0] = np.zeros(4)
    G = sparse.cholesky(bench._random_spd_sparse(20, rng))
    A = rng.standard_normal((st.dim, st.dim))
    fb = flt.FilterBelief(0.01 * (A @ A.T + np.eye(st.dim)), {0: G}, {0: 0.01 * rng.standard_normal((st.dim, 20))})
    H_R, H_M = bench._random_map_rows(rng, 5, 20, st.dim, np.arange(st.dim))
    batch = flt.MeasurementBatch(rng.standard_normal(10), H_R, 1.0, H_M, 0)
    s1, b1 = flt.cskf_map_update(st.copy(), fb.copy(), batch)
    s2, b2 = flt.scskf_map_update(st.copy(), fb.copy(), batch)
    assert np.array_equal(b1.P, b2.P) and np.array_equal(b1.gammas[0], b2.gammas[0])
    assert np.array_equal(bench.state_vector(s1), bench.state_vector(s2))


def test_untouched_submap_with_zero_gamma_stays_zero():
    rng = np.random.default_rng(6)
    st = bench._random_device(rng, 0)
    st.transforms[0] = np.zeros(4)
    G0 = sparse.cholesky(bench._random_spd_sparse(10, rng))
    G1 = sparse.cholesky(bench._random_spd_sparse(8, rng))
    fb = flt.FilterBelief(0.1 * np.eye(st.dim), {0: G0, 1: G1}, {1: np.zeros((st.dim, 8))})
    H_R, H_M = bench._random_map_rows(rng, 3, 10, st.dim, np.arange(st.dim))
    flt.cskf_map_update(st, fb, flt.MeasurementBatch(rng.standard_normal(6), H_R, 1.0, H_M, 0))
    assert not fb.gammas[1].any() and fb.gammas[0].any()


def test_inflated_update_vanishes_for_huge_noise():
    rng = np.random.default_rng(7)
    st = bench._random_device(rng, 0)
    fb = flt.FilterBelief(0.1 * np.eye(st.dim), {})
    p0 = st.p.copy()
    H_R = rng.standard_normal((4, st.dim))
    batch = flt.MeasurementBatch(rng.standard_normal(4), H_R, 1.0, rng.standard_normal((4, 3)), 0)
    flt.inflated_noise_update(st, fb, batch, 1e8)
    assert np.allclose(st.p, p0, atol=1e-12)


def _mp_schmidt(P, H, r, R, n_upd):
    """High-precision Schmidt update (reference for the large-prior limit)."""
    P, H, r, R = (mp.matrix(a.tolist() if a.ndim > 1 else [[v] for v in a]) for a in (P, H, r, R))
    S = H * P * H.T + R
    K = P * H.T * mp.inverse(S)
    for i in range(n_upd, K.rows):
        for j in range(K.cols):
            K[i, j] = 0
    n = P.rows
    IKH = mp.eye(n) - K * H
    Pn = IKH * P * IKH.T + K * R * K.T
    return K * r, Pn


def test_transform_initialization_matches_large_prior_limit():
    mp.mp.dps = 60
    rng = np.random.default_rng(8)
    st = bench._random_device(rng, 0)
    d = st.dim
    dm = 6
    Hm = bench._random_spd_sparse(dm, rng).toarray()
    G = sparse.cholesky(Hm)
    A = rng.standard_normal((d, d))
    P = 0.05 * (A @ A.T / d + np.eye(d))
    fb = flt.FilterBelief(P.copy(), {0: G})
    m = 8
    H_R = rng.standard_normal((m, d))
    H_tau = rng.standard_normal((m, 4))
    H_M = rng.standard_normal((m, dm))
    r = rng.standard_normal(m)
    p0 = st.p.copy()
    flt.initialize_map_transform(st, fb, 0, np.zeros(4), H_R, H_tau, H_M, r, 1.0)
    joint = flt.joint_covariance(fb)

    mu = 1e12
    n = d + 4 + dm
    Pz = np.zeros((n, n))
    Pz[:d, :d] = P
    Pz[d:d + 4, d:d + 4] = mu * np.eye(4)
    Pz[d + 4:, d + 4:] = np.linalg.inv(Hm)
    Hz = np.hstack([H_R, H_tau, H_M])
    dx, Pn = _mp_schmidt(Pz, Hz, r, np.eye(m), d + 4)
    dx = np.array(dx.tolist(), dtype=float).ravel()
    Pn = np.array(Pn.tolist(), dtype=float)
    assert np.allclose(st.p - p0, dx[3:6], atol=1e-5)
    assert np.allclose(st.transforms[0], dx[d:d + 4], atol=1e-5)
    assert np.allclose(joint, Pn, atol=1e-5)
    P_tt = joint[d:d + 4, d:d + 4]
    assert np.allclose(P_tt, P_tt.T) and np.linalg.eigvalsh(P_tt).min() > 0
    with pytest.raises(InsufficientFeatures):
        flt.initialize_map_transform(st, fb, 1, np.zeros(4), H_R[:2], H_tau[:2], H_M[:2], r[:2], 1.0)


def test_triangulation_noise_free():
    from cskf.geom import CameraModel, quat_exp, quat_to_rot
    cam = CameraModel()
    pf = np.array([0.3, -0.2, 4.0])
    quats = [quat_exp(np.array([0.0, 0.05 * i, 0.0])) for i in range(3)]
    pos = [np.array([0.2 * i, 0.0, 0.0]) for i in range(3)]
    uv = []
    for q, p in zip(quats, pos):
        y = quat_to_rot(q) @ (pf - p)
        uv.append([cam.fx * y[0] / y[2] + cam.cx, cam.fy * y[1] / y[2] + cam.cy])
    est = flt.triangulate(cam, quats, pos, np.array(uv), 1.0)
    est = est[0] if isinstance(est, tuple) else est
    assert np.allclose(est, pf, atol=1e-8)
