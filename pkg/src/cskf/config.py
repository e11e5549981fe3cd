"""INI experiment configuration.

Example (every key optional; defaults shown)::

    [world]
    n_features = 250
    revisit_count = 3

    [mapping]
    duration = 10.0
    variant = 0
    submaps = 2
    revisit_count = 1

    [run]
    duration = 25.0
    variant = 1
    modes = cskf, scskf, inflated, nomap
    seeds = 0-19
    sigma_inflated = 7.5
    inject_rate = 0.0

    [noise]
    gyro_noise = 1e-3
    accel_noise = 1e-2
    gyro_walk = 1e-5
    accel_walk = 1e-4
    pixel_sigma = 1.0
    outlier_rate = 0.0
    odom_rot_sigma = 2e-3
    odom_pos_sigma = 1e-2
    tilt_sigma = 2e-3
"""
from __future__ import annotations

import configparser
import dataclasses

from .bench import ExperimentConfig
from .errors import ConfigError
from .sim import NoiseConfig

_KEYS = {
    "world": {"n_features": ("n_features", int), "revisit_count": ("revisit_count", int)},
    "mapping": {"duration": ("map_duration", float), "variant": ("map_variant", int), "submaps": ("submaps", int),
                "revisit_count": ("map_revisit_count", int)},
    "run": {"duration": ("run_duration", float), "variant": ("run_variant", int),
            "sigma_inflated": ("sigma_inflated", float), "inject_rate": ("inject_rate", float)},
}


def parse_seeds(text):
    """``"0-4, 7"`` -> ``(0, 1, 2, 3, 4, 7)``."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad seed list entry {part!r}") from exc
    if not seeds:
        raise ConfigError("empty seed list")
    return tuple(seeds)


def _convert(section, key, raw, kind):
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc


def load_config(path=None, text=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file (or string) on top of ``base`` (defaults if None).

    Unknown sections or keys are errors, so typos do not pass silently.
    """
    cp = configparser.ConfigParser()
    try:
        if text is not None:
            cp.read_string(text)
        elif path is not None:
            with open(path) as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or ExperimentConfig()
    updates = {}
    noise = {}
    noise_fields = {f.name for f in dataclasses.fields(NoiseConfig)}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if section == "noise":
                if key not in noise_fields:
                    raise ConfigError(f"unknown key [noise] {key}")
                noise[key] = _convert(section, key, raw, float)
            elif section == "run" and key == "modes":
                updates["modes"] = tuple(m.strip() for m in raw.split(",") if m.strip())
            elif section == "run" and key == "seeds":
                updates["seeds"] = parse_seeds(raw)
            elif section in _KEYS and key in _KEYS[section]:
                name, kind = _KEYS[section][key]
                updates[name] = _convert(section, key, raw, kind)
            else:
                raise ConfigError(f"unknown key [{section}] {key}")
    if noise:
        updates["noise"] = dataclasses.replace(cfg.noise, **noise)
    cfg = dataclasses.replace(cfg, **updates)
    for name in ("map_duration", "run_duration"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    for name in ("revisit_count", "map_revisit_count"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.n_features <= 0:
        raise ConfigError("n_features must be positive")
    if not 0.0 <= cfg.inject_rate <= 1.0:
        raise ConfigError("inject_rate must lie in [0, 1]")
    return cfg.validate()
