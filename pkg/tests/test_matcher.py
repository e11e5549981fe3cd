import numpy as np
import pytest
import scipy.sparse as sp

from cskf import filter as flt
from cskf import matcher, sparse
from cskf.mapper import SubMap
from cskf.sim import Frame


def _toy_submap():
    # pose 0 at the origin, pose 1 far away and disjoint, pose 2 far away but
    # sharing most features with pose 0
    q = np.tile([0.0, 0.0, 0.0, 1.0], (3, 1))
    p = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    obs_pose = np.r_[[0] * 10, [1] * 10, [2] * 10]
    obs_feat = np.r_[np.arange(10), np.arange(10, 20), np.arange(2, 12)]
    m = 20
    dim = 6 * 3 + 3 * m
    return SubMap(np.arange(3.0), q, p, np.arange(m), np.zeros(m, dtype=np.int64), np.ones((m, 3)),
                  obs_pose, obs_feat, sparse.cholesky(sp.identity(dim, format="csc")))


def test_candidate_images():
    sm = _toy_submap()
    got = matcher.candidate_images_pose_assisted(np.zeros(3), np.eye(3), sm)
    assert got == {0, 2}
    assert matcher.candidate_images_pose_assisted(np.array([0.0, -20.0, 0.0]), np.eye(3), sm) == set()
    assert matcher.candidate_images_pose_assisted(np.zeros(3), np.eye(3), sm, covis_fraction=0.9) == {0}
    assert matcher.candidate_features(sm, {1}) == set(range(10, 20))


def _frame(n, rng):
    return Frame(0.0, 0, np.arange(n), rng.uniform(0, 600, (n, 2)), np.zeros(n, dtype=bool))


def test_match_with_exact_predictions_and_radius():
    rng = np.random.default_rng(0)
    fr = _frame(40, rng)
    pred = {int(i): uv for i, uv in zip(fr.ids, fr.uv)}
    corr = matcher.match_features(fr, 0, range(40), pred)
    assert [c.feature_id for c in corr.items] == list(range(40))
    far = {k: v + 31.0 for k, v in pred.items()}
    assert len(matcher.match_features(fr, 0, range(40), far)) == 0


def test_injection_rate_within_binomial_bounds():
    rng = np.random.default_rng(1)
    fr = _frame(1000, rng)
    corr = matcher.match_features(fr, 0, range(1000), None, inject_rate=0.05, rng=rng, mode="pose_less")
    n_inj = sum(c.injected for c in corr.items)
    n = len(fr.ids)
    assert abs(n_inj - 50) <= 3 * np.sqrt(n * 0.05 * 0.95)
    assert len({c.feature_id for c in corr.items}) == len(corr)


def _batch(n_feat, rng, r=None):
    d = 15
    H_R = rng.standard_normal((2 * n_feat, d))
    r = np.zeros(2 * n_feat) if r is None else r
    return flt.MeasurementBatch(r, H_R, 1.0, rng.standard_normal((2 * n_feat, 12)), 0), d


def test_gate_accepts_exact_and_rejects_gross_errors():
    rng = np.random.default_rng(2)
    batch, d = _batch(20, rng)
    belief = flt.FilterBelief(0.01 * np.eye(d), {0: sparse.cholesky(sp.identity(12, format="csc") * 4.0)})
    items = list(range(20))
    out, kept, J, d2 = matcher.gate(batch, items, belief)
    assert kept == items and np.allclose(d2, 0.0)
    r = np.zeros(40)
    # every S_f here is below 10 px^2 in scale, so 1e3 px is far beyond 100 sigma
    assert np.linalg.eigvalsh(batch.H_R[:2] @ belief.P @ batch.H_R[:2].T).max() < 10.0
    r[:2] = 1e3
    b2 = flt.MeasurementBatch(r, batch.H_R, 1.0, batch.H_M, 0)
    P_before = belief.P.copy()
    out, kept, _, d2 = matcher.gate(b2, items, belief)
    assert 0 not in kept and len(kept) == 19
    assert np.array_equal(belief.P, P_before)


def test_gate_rejects_whole_set_below_minimum():
    rng = np.random.default_rng(3)
    batch, d = _batch(12, rng)
    belief = flt.FilterBelief(0.01 * np.eye(d), {0: sparse.cholesky(sp.identity(12, format="csc"))})
    out, kept, J, _ = matcher.gate(batch, list(range(12)), belief)
    assert out is None and kept == []
    assert matcher.gate(batch, list(range(12)), belief, min_count=12)[0] is not None


@pytest.mark.slow
def test_gate_calibration_small():
    from cskf import bench
    res = bench.gate_calibration(n_features=1500, seed=11)
    assert 0.9 <= res["inlier_acceptance"] <= 0.99
    assert res["outlier_rejection"] >= 0.95
