import numpy as np
import pytest
import scipy.sparse as sp

from cskf import bench, sparse
from cskf.errors import ConfigError, SingularCovariance

# chi-square quantiles frozen from an independent mpmath root-find
NEES_50_RUNS = (2.3596903080580581, 3.7160089400758651)
CHI2_3 = (0.2157952826238979, 9.3484036044961458)


def test_nees_interval_matches_frozen_quantiles():
    assert np.allclose(bench.nees_interval(3, 50), NEES_50_RUNS, rtol=1e-10)
    assert np.allclose(bench.nees_interval(3, 1), CHI2_3, rtol=1e-10)


def test_nees_zero_error_and_scaling():
    P = np.repeat(np.diag([1.0, 2.0, 3.0])[None], 5, axis=0)
    out = bench.nees_series(np.zeros((5, 3)), P)
    assert np.all(out["nees"] == 0.0) and out["fraction_outside"] == 1.0
    full, half = bench.nees_sampling_check(n=10000, seed=0)
    lo, hi = bench.nees_interval(3, 10000)
    assert lo <= full <= hi
    assert half == pytest.approx(2 * full, rel=1e-12)
    with pytest.raises(SingularCovariance):
        bench.nees_series(np.ones((1, 3)), np.zeros((1, 3, 3)))


def test_memory_report_identity_map():
    G = sparse.cholesky(sp.identity(100, format="csc"))
    row = bench.memory_report([G])[0]
    assert row["dense_bytes"] == 80_000
    assert row["nnz"] == 100
    # values and row indices per entry, plus permutation and column pointers
    assert row["factor_bytes"] == 8 * (2 * 100 + 100 + 1 + 100)


def test_backsolve_small_map_records_time():
    sm = bench.corridor_map(60, seed=0)
    rows = bench.backsolve_benchmark([sm], reps=20)
    assert rows[0]["median_s"] > 0


def test_loglog_slope():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert bench.loglog_slope(x, 3 * x ** 1.25) == pytest.approx(1.25)


def test_jacobian_checks_small():
    worst = {k: float(v.max()) for k, v in bench.jacobian_checks(10, seed=3).items()}
    assert max(worst.values()) <= 1e-5


def test_config_validation_and_threads(monkeypatch):
    with pytest.raises(ConfigError):
        bench.ExperimentConfig(modes=("magic",)).validate()
    with pytest.raises(ConfigError):
        bench.ExperimentConfig(submaps=1).validate()
    monkeypatch.setenv("CSKF_THREADS", "3")
    assert bench.worker_count() == 3
    monkeypatch.setenv("CSKF_THREADS", "zero")
    with pytest.raises(ConfigError):
        bench.worker_count()


def test_reports_are_byte_reproducible(tmp_path):
    out = tmp_path / "r"
    cfg = bench.ExperimentConfig(modes=("cskf", "nomap"), seeds=(0,), map_duration=4.0, run_duration=3.0,
                                 n_features=150, out_dir=str(out))
    bench.run_experiment(cfg, workers=1)
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "timings.csv"}
    assert "summary.json" in first and "frames_cskf_0.csv" in first
    bench.run_experiment(cfg, workers=1)
    for name, data in first.items():
        assert (out / name).read_bytes() == data, name
