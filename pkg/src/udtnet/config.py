"""Experiment configuration: flat ``section.key = value`` text.

Example::

    master_seed = 7
    cohort.n_users = 40
    cohort.turn_sigma_deg = 0.3, 3.0     # per-user value drawn uniformly from the range
    video.n_frames = 300
    frequencies = 1, 2, 4, 8, 16, 30
    selection.strategies = min_modeling_error, random

Lines starting with ``#`` and trailing ``# ...`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .manage import STRATEGIES
from .pose_trace import PREDICTORS


class ConfigError(ValidationError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def default_frequencies() -> tuple[float, ...]:
    return tuple(float(f) for f in np.round(np.geomspace(1.0, 30.0, 10), 4))


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    output_dir: str = "out"
    threads: int = 1

    cohort_source: str = "synthetic"
    n_users: int = 40
    trace_dir: Optional[str] = None
    trace_format: str = "quaternion"
    duration_s: float = 10.0
    rate_hz: float = 30.0
    step_sigma_m: tuple[float, float] = (0.001, 0.01)
    turn_sigma_deg: tuple[float, float] = (0.3, 3.0)
    volatility: tuple[float, float] = (0.05, 0.5)
    recenter_rate: tuple[float, float] = (0.1, 1.0)
    distance_m: tuple[float, float] = (1.2, 2.0)
    height_m: tuple[float, float] = (-0.2, 0.2)

    video_source: str = "synthetic"
    video_dir: Optional[str] = None
    n_frames: int = 300
    n_points: int = 10000
    bounds: tuple[float, ...] = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    video_seed: Optional[int] = None

    frame_rate: float = 30.0
    predictor: str = "hold_last"
    uplink_delay_s: float = 0.0
    hfov_deg: float = 60.0
    vfov_deg: float = 45.0
    near_m: float = 0.1
    far_m: float = 10.0
    grid_dims: tuple[int, int, int] = (8, 8, 8)

    frequencies: tuple[float, ...] = field(default_factory=default_frequencies)
    degree: int = 3

    strategies: tuple[str, ...] = ("min_modeling_error", "random")
    selection_k: Optional[tuple[int, ...]] = None
    selection_seeds: int = 20

    allocation_grid: Optional[tuple[float, ...]] = None
    allocation_budget: Optional[float] = None
    allocation_udt_k: Optional[int] = None

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# config key -> (field name, parser)
def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _range(s: str) -> tuple[float, float]:
    vals = _floats(s)
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise ValueError("expected 'value' or 'low, high'")
    return vals


def _words(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none") else int(s)


def _k_list(s: str) -> Optional[tuple[int, ...]]:
    return None if s.strip().lower() in ("", "all") else _ints(s)


KEYS = {
    "master_seed": ("master_seed", int),
    "output_dir": ("output_dir", str),
    "threads": ("threads", int),
    "cohort.source": ("cohort_source", str),
    "cohort.n_users": ("n_users", int),
    "cohort.trace_dir": ("trace_dir", str),
    "cohort.trace_format": ("trace_format", str),
    "cohort.duration_s": ("duration_s", float),
    "cohort.rate_hz": ("rate_hz", float),
    "cohort.step_sigma_m": ("step_sigma_m", _range),
    "cohort.turn_sigma_deg": ("turn_sigma_deg", _range),
    "cohort.volatility": ("volatility", _range),
    "cohort.recenter_rate": ("recenter_rate", _range),
    "cohort.distance_m": ("distance_m", _range),
    "cohort.height_m": ("height_m", _range),
    "video.source": ("video_source", str),
    "video.path": ("video_dir", str),
    "video.n_frames": ("n_frames", int),
    "video.n_points": ("n_points", int),
    "video.bounds": ("bounds", _floats),
    "video.seed": ("video_seed", _opt_int),
    "delivery.frame_rate": ("frame_rate", float),
    "delivery.predictor": ("predictor", str),
    "delivery.uplink_delay_s": ("uplink_delay_s", float),
    "delivery.hfov_deg": ("hfov_deg", float),
    "delivery.vfov_deg": ("vfov_deg", float),
    "delivery.near_m": ("near_m", float),
    "delivery.far_m": ("far_m", float),
    "delivery.grid_dims": ("grid_dims", _ints),
    "frequencies": ("frequencies", _floats),
    "fit.degree": ("degree", int),
    "selection.strategies": ("strategies", _words),
    "selection.k": ("selection_k", _k_list),
    "selection.seeds": ("selection_seeds", int),
    "allocation.grid": ("allocation_grid", _floats),
    "allocation.budget": ("allocation_budget", float),
    "allocation.udt_k": ("allocation_udt_k", _opt_int),
}


def parse_config_text(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        name, parse = KEYS[key]
        try:
            values[name] = parse(value)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {value!r} ({exc})") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), **overrides)


def validate(cfg: ExperimentConfig) -> None:
    def need(ok: bool, key: str, msg: str):
        if not ok:
            raise ConfigError(key, msg)

    need(cfg.threads >= 1, "threads", "must be at least 1")
    need(cfg.cohort_source in ("synthetic", "trace_dir"), "cohort.source", "must be synthetic or trace_dir")
    if cfg.cohort_source == "synthetic":
        need(cfg.n_users >= 1, "cohort.n_users", "must be at least 1")
    else:
        need(bool(cfg.trace_dir), "cohort.trace_dir", "required when cohort.source = trace_dir")
    need(cfg.trace_format in ("quaternion", "euler_xyz_deg"), "cohort.trace_format",
         "must be quaternion or euler_xyz_deg")
    need(cfg.duration_s > 0, "cohort.duration_s", "must be positive")
    need(cfg.rate_hz > 0, "cohort.rate_hz", "must be positive")
    for key, name, lo, hi in (
        ("cohort.step_sigma_m", "step_sigma_m", 0.0, np.inf),
        ("cohort.turn_sigma_deg", "turn_sigma_deg", 0.0, np.inf),
        ("cohort.volatility", "volatility", 0.0, 1.0),
        ("cohort.recenter_rate", "recenter_rate", 0.0, np.inf),
        ("cohort.distance_m", "distance_m", 0.0, np.inf),
        ("cohort.height_m", "height_m", -np.inf, np.inf),
    ):
        a, b = getattr(cfg, name)
        need(lo <= a <= b <= hi, key, f"need {lo} <= low <= high <= {hi}")
    need(cfg.video_source in ("synthetic", "ply_dir"), "video.source", "must be synthetic or ply_dir")
    if cfg.video_source == "ply_dir":
        need(bool(cfg.video_dir), "video.path", "required when video.source = ply_dir")
    need(cfg.n_frames >= 1, "video.n_frames", "must be at least 1")
    need(cfg.n_points >= 1, "video.n_points", "must be at least 1")
    need(len(cfg.bounds) == 6 and all(cfg.bounds[i] < cfg.bounds[i + 3] for i in range(3)),
         "video.bounds", "need 'xmin, ymin, zmin, xmax, ymax, zmax' with min < max")
    need(cfg.frame_rate > 0, "delivery.frame_rate", "must be positive")
    need(cfg.predictor in PREDICTORS, "delivery.predictor", f"must be one of {PREDICTORS}")
    need(cfg.uplink_delay_s >= 0, "delivery.uplink_delay_s", "must be non-negative")
    need(0 < cfg.hfov_deg < 180, "delivery.hfov_deg", "must lie in (0, 180)")
    need(0 < cfg.vfov_deg < 180, "delivery.vfov_deg", "must lie in (0, 180)")
    need(0 < cfg.near_m < cfg.far_m, "delivery.near_m", "need 0 < near_m < far_m")
    need(len(cfg.grid_dims) == 3 and all(d >= 1 for d in cfg.grid_dims), "delivery.grid_dims",
         "need three positive integers")
    f = cfg.frequencies
    need(len(f) >= 1, "frequencies", "at least one frequency is required")
    need(all(x > 0 for x in f), "frequencies", "must be positive")
    need(all(b > a for a, b in zip(f, f[1:])), "frequencies", "must be strictly ascending (unique)")
    need(cfg.degree == 3, "fit.degree", "only third-order models are supported")
    need(len(cfg.strategies) >= 1 and all(s in STRATEGIES for s in cfg.strategies),
         "selection.strategies", f"each must be one of {STRATEGIES}")
    need(cfg.selection_k is None or all(k >= 0 for k in cfg.selection_k), "selection.k", "must be >= 0")
    need(cfg.selection_seeds >= 1, "selection.seeds", "must be at least 1")
    if cfg.allocation_grid is not None or cfg.allocation_budget is not None:
        g = cfg.allocation_grid
        need(g is not None and len(g) >= 1, "allocation.grid", "required when allocating")
        need(all(b > a for a, b in zip(g, g[1:])) and g[0] > 0, "allocation.grid", "must be positive and ascending")
        need(cfg.allocation_budget is not None, "allocation.budget", "required when allocating")
    need(cfg.allocation_udt_k is None or cfg.allocation_udt_k >= 0, "allocation.udt_k", "must be >= 0")
