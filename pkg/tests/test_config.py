import pytest

from cskf.config import load_config, parse_seeds
from cskf.errors import ConfigError


def test_parse_seeds():
    assert parse_seeds("0-3, 7") == (0, 1, 2, 3, 7)
    assert parse_seeds(5) == (5,)
    for bad in ("", "a-b", ","):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_load_config_overrides():
    cfg = load_config(text="""
[world]
n_features = 120
[mapping]
revisit_count = 2
[run]
modes = cskf, nomap
seeds = 2-4
sigma_inflated = 5
[noise]
pixel_sigma = 0.5
""")
    assert cfg.n_features == 120 and cfg.modes == ("cskf", "nomap") and cfg.seeds == (2, 3, 4)
    assert cfg.sigma_inflated == 5.0 and cfg.noise.pixel_sigma == 0.5
    assert cfg.noise.gyro_noise == 1e-3
    assert cfg.map_revisit_count == 2 and cfg.revisit_count == 3


@pytest.mark.parametrize("text", [
    "[world]\nn_feature = 3\n",
    "[bogus]\nx = 1\n",
    "[noise]\npixel = 1\n",
    "[run]\nduration = soon\n",
    "[mapping]\nrevisit_count = 0\n",
    "[run]\nduration = -1\n",
    "[run]\ninject_rate = 2\n",
    "[run]\nmodes = cskf, slam\n",
    "not an ini file",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_load_from_file(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text("[mapping]\nsubmaps = 3\n")
    assert load_config(str(p)).submaps == 3
