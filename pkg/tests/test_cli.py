import json

import pytest

from cskf import cli


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_sim_generate_and_map_commands(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    cfg.write_text("[world]\nn_features = 150\n[mapping]\nduration = 4\n[run]\nduration = 2\n")
    assert cli.main(["sim", "generate", "--seed", "1", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    out = _json(capsys)
    assert out["frames"] > 0
    for name in ("imu.csv", "obs.csv", "truth.csv", "world.csv"):
        assert (tmp_path / "s" / name).exists()

    bundle = tmp_path / "map.bin"
    assert cli.main(["map", "build", "--seed", "1", "--submaps", "2", "--config", str(cfg), "--out", str(bundle)]) == 0
    assert len(_json(capsys)["submaps"]) == 2
    assert cli.main(["map", "inspect", str(bundle)]) == 0
    assert _json(capsys)["version"] == 1
    assert cli.main(["map", "export", str(bundle), "--out", str(tmp_path / "csv")]) == 0
    capsys.readouterr()
    assert (tmp_path / "csv" / "submap1_features.csv").exists()
    assert cli.main(["map", "partition", "--seed", "1", "--config", str(cfg)]) == 0
    assert len(_json(capsys)["ranges"]) == 2


def test_run_command(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    cfg.write_text("[world]\nn_features = 150\n[mapping]\nduration = 4\n[run]\nduration = 2\n")
    out = tmp_path / "run"
    assert cli.main(["run", "--mode", "nomap", "--seed", "0", "--config", str(cfg), "--out", str(out)]) == 0
    assert _json(capsys)["modes"]["nomap"]["runs"] == 1
    assert (out / "summary.json").exists() and (out / "frames_nomap_0.csv").exists()


def test_bench_memory(tmp_path, capsys):
    assert cli.main(["bench", "memory", "--dims", "300,600", "--out", str(tmp_path)]) == 0
    assert len(_json(capsys)["rows"]) == 2
    assert (tmp_path / "memory.csv").exists()


def test_errors_give_exit_code_two(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    assert cli.main(["map", "inspect", str(bad)]) == 2
    assert "FormatError" in capsys.readouterr().err
    assert cli.main(["map", "inspect", str(tmp_path / "missing.bin")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["run", "--mode", "slam", "--out", str(tmp_path)])
