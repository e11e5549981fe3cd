import numpy as np
import pytest
import scipy.sparse as sp

from cskf import bench, mapper, sim, sparse
from cskf.errors import ChecksumMismatch, FormatError, TooFewPoses, VersionMismatch
from cskf.geom import rot_z


@pytest.fixture(scope="module")
def noise_free_map():
    world = sim.make_room_world(n_features=150, seed=0)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=4.0), world, sim.NoiseConfig.noise_free(), seed=0)
    res, prob = mapper.build_map_bls(ms)
    return world, ms, res, prob


@pytest.fixture(scope="module")
def noisy_bundle():
    world = sim.make_room_world(n_features=150, seed=1)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=4.0), world, sim.NoiseConfig(), seed=1)
    return ms, mapper.build_submaps(ms, 2)


def test_noise_free_map_recovers_world(noise_free_map):
    world, ms, res, prob = noise_free_map
    b = mapper.bundle_from_bls(res, prob, ms)
    sm = b.submaps[0]
    T = sm.truth_transform
    g = T[1:4] + sm.feature_positions() @ rot_z(T[0]).T
    assert np.abs(g - world.points[sm.feature_ids]).max() < 1e-6


def test_factor_reconstructs_hessian(noise_free_map):
    _, _, res, _ = noise_free_map
    H = res.hessian.to_dense()
    assert np.abs(res.factor.hessian() - H).max() <= 1e-9 * np.abs(H).max()


def test_fill_reducing_ordering_never_adds_fill(noise_free_map):
    _, _, res, _ = noise_free_map
    H = res.hessian.to_dense()
    assert sparse.cholesky(H, "fill_reducing").nnz <= sparse.cholesky(H, "natural").nnz


def test_partition_is_time_even_and_classifies_features():
    world = sim.make_room_world(n_features=150, seed=2)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=4.0), world, sim.NoiseConfig(), seed=2)
    part = mapper.partition_submaps(ms, 2)
    (a0, a1), (b0, b1) = part.ranges
    assert a0 == 0 and a1 == b0 and b1 == len(ms.frames) and abs((a1 - a0) - (b1 - b0)) <= 1
    for seg, (a, b) in zip(part.features, part.ranges):
        ids = np.concatenate([f.ids for f in ms.frames[a:b]])
        assert np.isin(seg, ids).all()
    assert np.array_equal(part.common, np.intersect1d(*part.features))
    with pytest.raises(TooFewPoses):
        mapper.partition_submaps(ms, len(ms.frames))


def test_constrained_solution_satisfies_constraints(noisy_bundle):
    ms, bundle = noisy_bundle
    part = mapper.partition_submaps(ms, 2)
    res = mapper.solve_cm_constrained(part, ms)
    assert res.constraint_violation <= 1e-8
    m1 = res.estimates[0].feature_positions()[np.searchsorted(res.estimates[0].feature_ids, res.common)]
    m2 = res.estimates[1].feature_positions()[np.searchsorted(res.estimates[1].feature_ids, res.common)]
    y, t = res.xtau[0], res.xtau[1:4]
    assert np.abs(m1 - (t + m2 @ rot_z(y).T)).max() < 1e-8


def test_disjoint_features_give_independent_solutions():
    world = sim.make_room_world(n_features=150, seed=3)
    ms = sim.generate_mapping_session(sim.TrajectorySpec(duration=4.0), world, sim.NoiseConfig(), seed=3)
    part = mapper.partition_submaps(ms, 2)
    part.common = np.array([], dtype=np.int64)
    # drop the shared features from the second segment so nothing ties the maps
    part.features[1] = np.setdiff1d(part.features[1], part.features[0])
    res = mapper.solve_cm_constrained(part, ms)
    assert res.xtau is None and res.iterations == 0
    prob = mapper.make_problem(ms, np.arange(*part.ranges[0]), mapper.CameraModel(), feature_ids=part.features[0],
                               min_parallax=mapper.MIN_PARALLAX)
    alone = mapper.solve_bls(prob)
    assert np.allclose(alone.estimate.f, res.estimates[0].f)


def test_bundle_round_trip(tmp_path, noisy_bundle):
    _, bundle = noisy_bundle
    path = tmp_path / "map.bin"
    mapper.export_bundle(path, bundle)
    back = mapper.import_bundle(path)
    assert back.snapshot() == bundle.snapshot()
    assert np.array_equal(back.inter_transforms, bundle.inter_transforms)
    mapper.export_bundle(tmp_path / "again.bin", back)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_bundle_corruption_detected(tmp_path, noisy_bundle):
    _, bundle = noisy_bundle
    path = tmp_path / "map.bin"
    mapper.export_bundle(path, bundle)
    buf = path.read_bytes()
    with pytest.raises(FormatError):
        mapper.bundle_from_bytes(buf[: len(buf) // 2])
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0x01
    with pytest.raises(FormatError):
        mapper.bundle_from_bytes(bytes(flipped))
    bad = bytearray(buf)
    bad[4] = 7
    with pytest.raises(VersionMismatch):
        mapper.bundle_from_bytes(bytes(bad))
    assert issubclass(ChecksumMismatch, FormatError)


def test_factor_dimension_mismatch_rejected(noisy_bundle):
    _, bundle = noisy_bundle
    sm = bundle.submaps[0]
    wrong = mapper.SubMap(sm.pose_t, sm.pose_q, sm.pose_p, sm.feature_ids, sm.anchor, sm.f_anchor,
                          sm.obs_pose, sm.obs_feat, sparse.cholesky(sp.identity(sm.dim + 3, format="csc")))
    with pytest.raises(FormatError):
        wrong.validate()


def test_kkt_relaxation_is_conservative():
    rows = bench.verify_kkt(n_problems=3, seed=5)
    assert all(r["gap_ok"] and r["M_ok"] for r in rows)
    assert bench.kkt_without_constraints(seed=0) < 1e-10
    bad = bench.verify_kkt(n_problems=3, seed=5, mutate=True)
    assert not all(r["gap_ok"] and r["M_ok"] for r in bad)
