"""Flat ``key = value`` run configuration.

Defaults come from the dataclasses; a file overrides defaults and command-line
flags override the file. Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .pipeline import PipelineConfig


@dataclass
class IoConfig:
    scan_format: str = ""           # empty: guess from file extension
    pose_format: str = "kitti"
    filter_enabled: bool = False
    filter_size: float = 0.25


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    io: IoConfig = field(default_factory=IoConfig)


# key -> (section path, attribute)
KEYS = {
    "w": ("pipeline.pyramid", "w"),
    "s": ("pipeline.pyramid", "s"),
    "n": ("pipeline.pyramid", "n"),
    "l": ("pipeline.pyramid", "l"),
    "theta_local": ("pipeline.pyramid", "theta_local"),
    "voxel_local": ("pipeline.pyramid", "voxel_local"),
    "theta_global": ("pipeline.pyramid", "theta_global"),
    "voxel_global": ("pipeline.pyramid", "voxel_global"),
    "min_points": ("pipeline.pyramid", "min_points"),
    "max_depth": ("pipeline.pyramid", "max_depth"),
    "keyframe_downsample": ("pipeline.pyramid", "keyframe_downsample"),
    "max_iter": ("pipeline.ba", "max_iter"),
    "lambda_init": ("pipeline.ba", "lambda_init"),
    "lambda_up": ("pipeline.ba", "lambda_up"),
    "lambda_dn": ("pipeline.ba", "lambda_dn"),
    "grad_tol": ("pipeline.ba", "grad_tol"),
    "step_tol": ("pipeline.ba", "step_tol"),
    "hessian": ("pipeline.ba", "hessian"),
    "pg_max_iter": ("pipeline.graph", "max_iter"),
    "pg_grad_tol": ("pipeline.graph", "grad_tol"),
    "max_passes": ("pipeline", "max_passes"),
    "rel_cost_tol": ("pipeline", "rel_cost_tol"),
    "abs_cost_tol": ("pipeline", "abs_cost_tol"),
    "mode": ("pipeline", "mode"),
    "scan_format": ("io", "scan_format"),
    "pose_format": ("io", "pose_format"),
    "filter_enabled": ("io", "filter_enabled"),
    "filter_size": ("io", "filter_size"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _section(cfg, path):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _convert(current, raw, key):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip()


def set_value(cfg: RunConfig, key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section, attr = KEYS[key]
    obj = _section(cfg, section)
    setattr(obj, attr, _convert(getattr(obj, attr), str(raw), key))


def parse_config_text(text):
    """``{key: raw string}`` from ``key = value`` lines (``#`` starts a comment)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = val
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config: not found ({path})") from None
        for key, val in parse_config_text(text).items():
            set_value(cfg, key, val)
    for key, val in (overrides or {}).items():
        if val is not None:
            set_value(cfg, key, val)
    cfg.pipeline.validate()
    if cfg.io.pose_format not in ("kitti", "tum"):
        raise ConfigError(f"pose_format must be kitti or tum, got {cfg.io.pose_format!r}")
    if cfg.io.filter_size <= 0:
        raise ConfigError("filter_size must be > 0")
    return cfg


def dump_config(cfg: RunConfig):
    return "".join(f"{k} = {getattr(_section(cfg, s), a)}\n" for k, (s, a) in KEYS.items())
