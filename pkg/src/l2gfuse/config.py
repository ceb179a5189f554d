"""Flat ``key = value`` experiment configuration.

Keys may appear in any order; ``profile`` selects the dataset defaults that
all other keys override. Lists are comma separated, booleans are
``true``/``false``, ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from .fusion import PIE_MODES, FusionConfig
from .voxel import VoxelConfig

__all__ = ["ConfigError", "EvalSettings", "GeneratorSettings", "PROFILES", "RunConfig", "build_config",
           "config_keys", "config_to_text", "load_config", "parse_config_text"]

PROFILES = {
    "wod": VoxelConfig(range_min=(-75.2, -75.2, -2.0), range_max=(75.2, 75.2, 4.0),
                       base_voxel_size=(0.1, 0.1, 0.15), levels=(1, 2, 4, 8)),
    "kitti": VoxelConfig(range_min=(0.0, -40.0, -3.0), range_max=(70.4, 40.0, 1.0),
                         base_voxel_size=(0.05, 0.05, 0.1), levels=(1, 2, 4, 8)),
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class GeneratorSettings:
    seed: int = 0
    n_objects: int = 20
    n_cameras: int = 5
    points_per_object: int = 400
    clutter_ratio: float = 0.5
    extent: float = 30.0
    center_sigma: float = 0.15
    size_sigma: float = 0.05
    heading_sigma: float = 0.1
    proposal_seed: int = 1
    param_seed: int = 2
    precision: int = 32


@dataclass(frozen=True)
class EvalSettings:
    iou_vehicle: float = 0.7
    iou_pedestrian: float = 0.5
    iou_cyclist: float = 0.5

    def thresholds(self) -> dict[int, float]:
        return {0: self.iou_vehicle, 1: self.iou_pedestrian, 2: self.iou_cyclist}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "wod"
    voxel: VoxelConfig = field(default_factory=lambda: PROFILES["wod"])
    fusion: FusionConfig = field(default_factory=FusionConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(n: int | None) -> Callable[[str], tuple[float, ...]]:
    def parse(text: str) -> tuple[float, ...]:
        vals = tuple(float(v) for v in text.split(","))
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _pie_mode(text: str) -> str:
    mode = text.strip().upper().replace("+", "_")
    if mode not in PIE_MODES:
        raise ValueError(f"pie_mode must be one of {', '.join(PIE_MODES)}")
    return mode


# key -> (section, attribute, parser)
_KEYS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "voxel_size": ("voxel", "base_voxel_size", _floats(3)),
    "range_min": ("voxel", "range_min", _floats(3)),
    "range_max": ("voxel", "range_max", _floats(3)),
    "levels": ("voxel", "levels", _ints),
    "u": ("fusion", "u", int),
    "M": ("fusion", "heads", int),
    "K": ("fusion", "points", int),
    "tau": ("fusion", "tau", float),
    "alpha": ("fusion", "alpha", float),
    "levels_for_gof": ("fusion", "levels_for_gof", _ints),
    "enable_gof": ("fusion", "enable_gof", _bool),
    "enable_lof": ("fusion", "enable_lof", _bool),
    "enable_fda": ("fusion", "enable_fda", _bool),
    "pie_mode": ("fusion", "pie_mode", _pie_mode),
    "pool_neighbors": ("fusion", "pool_neighbors", int),
    "pool_radius_factor": ("fusion", "pool_radius_factor", float),
    "point_channels": ("fusion", "point_channels", int),
    "voxel_channels": ("fusion", "voxel_channels", int),
    "image_channels": ("fusion", "image_channels", int),
    "grid_channels": ("fusion", "grid_channels", int),
    "refine_hidden": ("fusion", "refine_hidden", int),
    "conf_iou_low": ("fusion", "conf_iou_low", float),
    "conf_iou_high": ("fusion", "conf_iou_high", float),
    "reg_iou_gate": ("fusion", "reg_iou_gate", float),
    "smooth_l1_beta": ("fusion", "smooth_l1_beta", float),
    "seed": ("generator", "seed", int),
    "n_objects": ("generator", "n_objects", int),
    "n_cameras": ("generator", "n_cameras", int),
    "points_per_object": ("generator", "points_per_object", int),
    "clutter_ratio": ("generator", "clutter_ratio", float),
    "extent": ("generator", "extent", float),
    "center_sigma": ("generator", "center_sigma", float),
    "size_sigma": ("generator", "size_sigma", float),
    "heading_sigma": ("generator", "heading_sigma", float),
    "proposal_seed": ("generator", "proposal_seed", int),
    "param_seed": ("generator", "param_seed", int),
    "precision": ("generator", "precision", int),
    "iou_vehicle": ("eval", "iou_vehicle", float),
    "iou_pedestrian": ("eval", "iou_pedestrian", float),
    "iou_cyclist": ("eval", "iou_cyclist", float),
}


def config_keys() -> list[str]:
    return ["profile", *_KEYS]


def parse_config_text(text: str) -> dict[str, tuple[str, int]]:
    """Raw ``{key: (value, line number)}``; rejects duplicates and malformed lines."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _KEYS and key != "profile":
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (first on line {raw[key][1]})", lineno)
        raw[key] = (value, lineno)
    return raw


def build_config(raw: dict[str, tuple[str, int | None]]) -> RunConfig:
    profile = raw.get("profile", ("wod", None))
    name = profile[0].strip().lower()
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {profile[0]!r} (expected wod or kitti)", profile[1])
    updates: dict[str, dict[str, object]] = {"voxel": {}, "fusion": {}, "generator": {}, "eval": {}}
    for key, (value, lineno) in raw.items():
        if key == "profile":
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        section, attr, parse = _KEYS[key]
        try:
            updates[section][attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key} = {value!r}: {exc}", lineno) from None
    try:
        return RunConfig(
            profile=name,
            voxel=replace(PROFILES[name], **updates["voxel"]),
            fusion=replace(FusionConfig(), **updates["fusion"]),
            generator=replace(GeneratorSettings(), **updates["generator"]),
            eval=replace(EvalSettings(), **updates["eval"]),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a config file (or defaults when ``path`` is None) and apply overrides."""
    raw: dict[str, tuple[str, int | None]] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        raw[key] = (value, None)
    return build_config(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    """Full, explicit config text that :func:`load_config` reads back to ``cfg``."""
    lines = [f"profile = {cfg.profile}"]
    for key, (section, attr, _) in _KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(getattr(cfg, section), attr))}")
    return "\n".join(lines) + "\n"


def config_snapshot(cfg: RunConfig) -> dict:
    return {"profile": cfg.profile, **{s: asdict(getattr(cfg, s)) for s in ("voxel", "fusion", "generator", "eval")}}
