"""Flat `key = value` configuration covering every tunable in the library.

A config file is plain text: one `key = value` per line, `#` comments,
blank lines ignored.  Every key has a registered default and type;
unknown keys and malformed values are configuration errors.  The same
registry backs programmatic overrides, so tests and the command line
share one validation path.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .heads import RefineConfig
from .roi_encoder import RfeConfig
from .voxels import GridSpec

__all__ = ["Config", "DEFAULTS", "parse_value", "load_config"]


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(part.strip()) for part in s.split(","))


def _parse_float_tuple(s: str) -> tuple:
    return tuple(float(part.strip()) for part in s.split(","))


# key -> (default value, parser applied to the raw string)
DEFAULTS: dict[str, tuple] = {
    # ROI feature encoder
    "rfe.d_a": (128, int),
    "rfe.hidden": (256, int),
    "rfe.repeats": (3, int),
    "rfe.scale_order": ((4, 3, 1), _parse_int_tuple),
    "rfe.budgets": ((64, 128, 256), _parse_int_tuple),
    "rfe.enlargement": (0.5, float),
    "rfe.attention": ("vector", str),
    "rfe.norm": ("layer", str),
    "rfe.heads": (4, int),
    # voxel encoder
    "encoder.channels": ((16, 32, 64, 64), _parse_int_tuple),
    # detection and auxiliary heads
    "heads.hidden": (256, int),
    "aux.enabled": (True, _parse_bool),
    "aux.hidden": (64, int),
    # loss thresholds and switches
    "loss.chi_h": (0.75, float),
    "loss.chi_l": (0.25, float),
    "loss.chi_reg": (0.55, float),
    "loss.focal_alpha": (0.25, float),
    "loss.focal_gamma": (2.0, float),
    "loss.huber_delta": (1.0, float),
    "loss.residue_diag": ("size", str),
    "loss.reg_gate": ("raw_iou", str),
    # grid over the sensor range
    "grid.range_min": ((0.0, -40.0, -3.0), _parse_float_tuple),
    "grid.range_max": ((70.4, 40.0, 1.0), _parse_float_tuple),
    "grid.voxel_size": ((0.05, 0.05, 0.1), _parse_float_tuple),
    # training loop
    "train.lr": (1e-3, float),
    "train.steps": (300, int),
    "train.rois_per_scene": (128, int),
    "train.nms_threshold": (0.8, float),
    "train.nms_keep": (512, int),
    "train.one_cycle": (False, _parse_bool),
    "train.max_lr": (0.01, float),
    "train.checkpoint_every": (0, int),  # 0 = once per epoch
    # evaluation
    "eval.nms_threshold": (0.7, float),
    "eval.nms_keep": (100, int),
    "eval.iou_mode": ("3d", str),
    "eval.match_threshold_car": (0.7, float),
    "eval.match_threshold_small": (0.5, float),
    # synthetic scenes
    "scene.boxes_min": (3, int),
    "scene.boxes_max": (6, int),
    "scene.car_fraction": (0.7, float),
    "scene.points_min": (60, int),
    "scene.points_max": (120, int),
    "scene.background_points": (256, int),
    "scene.noise_sigma": (0.0, float),
    # proposal jitter
    "jitter.trans_sigma": (0.3, float),
    "jitter.size_sigma": (0.0, float),
    "jitter.yaw_sigma": (0.1, float),
    "jitter.drop_rate": (0.0, float),
    "jitter.spurious_rate": (0.0, float),
}


def parse_value(key: str, raw: str):
    """Parse the raw string for `key` with its registered type."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    _, parser = DEFAULTS[key]
    try:
        return parser(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


class Config:
    """Validated snapshot of every knob, with typed access by key."""

    def __init__(self, overrides: dict | None = None):
        self._values = {key: default for key, (default, _) in DEFAULTS.items()}
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = value

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def items(self):
        return self._values.items()

    def updated(self, overrides: dict) -> "Config":
        merged = dict(self._values)
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        return Config(merged)

    # structured views ------------------------------------------------

    def rfe(self) -> RfeConfig:
        return RfeConfig(
            d_a=self["rfe.d_a"],
            hidden=self["rfe.hidden"],
            repeats=self["rfe.repeats"],
            scale_order=self["rfe.scale_order"],
            budgets=self["rfe.budgets"],
            enlargement=self["rfe.enlargement"],
            attention=self["rfe.attention"],
            norm=self["rfe.norm"],
            heads=self["rfe.heads"],
        )

    def refine(self) -> RefineConfig:
        return RefineConfig(
            chi_h=self["loss.chi_h"],
            chi_l=self["loss.chi_l"],
            chi_reg=self["loss.chi_reg"],
            focal_alpha=self["loss.focal_alpha"],
            focal_gamma=self["loss.focal_gamma"],
            huber_delta=self["loss.huber_delta"],
            residue_diag=self["loss.residue_diag"],
            reg_gate=self["loss.reg_gate"],
        )

    def grid(self) -> GridSpec:
        return GridSpec(
            np.asarray(self["grid.range_min"]),
            np.asarray(self["grid.range_max"]),
            np.asarray(self["grid.voxel_size"]),
        )

    def channels(self) -> tuple:
        ch = self["encoder.channels"]
        if len(ch) != 4:
            raise ConfigError(f"encoder.channels needs 4 entries, got {ch}")
        return tuple(ch)


def read_config_file(path: str) -> dict:
    """Parse a ``key = value`` file into a dict of just the keys it sets."""
    values: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            values[key] = parse_value(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Read a config file (optional) and apply programmatic overrides on top."""
    values = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        values[key] = value
    return Config(values)
