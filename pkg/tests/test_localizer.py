import numpy as np
import pytest

from cskf import bench, mapper, sim
from cskf import filter as flt
from cskf import localizer as loc
from cskf.geom import CameraModel


def _truth_state(truth):
    return flt.DeviceState(truth.q[0].copy(), truth.p[0].copy(), truth.bg[0].copy(), truth.v[0].copy(),
                           truth.ba[0].copy(), float(truth.t[0]))


@pytest.fixture(scope="module")
def small_world():
    cfg = bench.ExperimentConfig(map_duration=6.0, run_duration=5.0, n_features=200)
    world, ms, session = bench.build_world(cfg, 4)
    bls, prob = mapper.build_map_bls(ms)
    return session, mapper.bundle_from_bls(bls, prob, ms), mapper.build_submaps(ms, 2)


def test_nomap_noise_free_is_exact():
    world = sim.make_room_world(seed=0)
    nf = sim.NoiseConfig.noise_free()
    s = sim.generate_session(sim.TrajectorySpec(duration=4.0, variant=1), world, nf, seed=0)
    lc = loc.LocalizerConfig(mode="nomap")
    res = loc.Localizer(None, CameraModel(sigma=1.0), nf, lc).run(s, state0=_truth_state(s.truth))
    assert res.rmse() < 1e-5


@pytest.mark.parametrize("mode,which", [("cskf", 1), ("scskf", 2), ("inflated", 1)])
def test_map_is_never_modified(small_world, mode, which):
    session, full, sub = small_world
    bundle = full if which == 1 else sub
    before = bundle.snapshot()
    res = loc.Localizer(bundle, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(mode=mode), seed=1).run(session)
    assert bundle.snapshot() == before
    assert sum(r.map_rows > 0 for r in res.records) > 0


def test_runs_are_deterministic(small_world):
    session, full, _ = small_world
    a = loc.Localizer(full, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(), seed=3).run(session)
    b = loc.Localizer(full, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(), seed=3).run(session)
    assert np.array_equal(a.errors(), b.errors()) and np.array_equal(a.nees(), b.nees())


def test_dense_oracle_mode_tracks_factorized(small_world):
    session, full, _ = small_world
    a = loc.Localizer(full, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(mode="cskf"), seed=2).run(session)
    b = loc.Localizer(full, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(mode="oracle"), seed=2).run(session)
    assert [r.map_rows for r in a.records] == [r.map_rows for r in b.records]
    assert np.abs(a.errors() - b.errors()).max() < 1e-6


def test_cskf_rejects_multi_map_bundle(small_world):
    _, _, sub = small_world
    with pytest.raises(ValueError):
        loc.Localizer(sub, CameraModel(), sim.NoiseConfig(), loc.LocalizerConfig(mode="cskf"))
    with pytest.raises(ValueError):
        loc.LocalizerConfig(mode="slam")


def test_ransac_align_finds_inliers():
    rng = np.random.default_rng(0)
    src = rng.uniform(-3, 3, (30, 3))
    from cskf.geom import rot_z
    dst = src @ rot_z(0.4).T + np.array([1.0, 2.0, 0.5])
    dst[:5] += 2.0
    inl = loc.ransac_align(src, dst, 0.05, rng)
    assert inl[5:].all() and not inl[:5].any()
