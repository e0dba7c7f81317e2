"""Flat key=value config files feeding loss weights, motion, and scoring settings.

Lines look like ``tau_motion = 0.1``; ``#`` starts a comment. Values parse
as bool, int, float, or (optionally quoted) string. CLI flags override file
values.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .losses import CLASS_NAMES, ClassWeightTable, LossWeights
from .motion import MotionConfig
from .planning import RolloutConfig


def parse_config_text(text: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError("bad_config", f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ValidationError("bad_config", f"line {lineno}: empty key or value")
        values[key] = _parse_value(value)
    return values


def _parse_value(token: str):
    if token.lower() in ("true", "false"):
        return token.lower() == "true"
    if len(token) >= 2 and token[0] == token[-1] and token[0] in ("'", '"'):
        return token[1:-1]
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ValidationError("missing_file", f"cannot read config {path}: {e}") from e


def _pick(cfg: dict, cls, names: tuple, **overrides):
    kwargs = {name: cfg[name] for name in names if name in cfg}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def loss_weights_from_config(cfg: dict, **overrides) -> LossWeights:
    names = (
        "lambda_seg",
        "lambda_pose",
        "lambda_point",
        "lambda_motion",
        "lambda_conf",
        "lambda_trans",
        "lambda_future",
        "omega",
        "alpha",
        "huber_delta",
        "conf_threshold",
    )
    return _pick(cfg, LossWeights, names, **overrides)


def class_weights_from_config(cfg: dict) -> ClassWeightTable:
    table = ClassWeightTable()
    weights = table.weights.copy()
    for i, name in enumerate(CLASS_NAMES):
        key = f"class_weight_{name}"
        if key in cfg:
            weights[i] = float(cfg[key])
    return ClassWeightTable(np.asarray(weights))


def motion_config_from_config(cfg: dict, **overrides) -> MotionConfig:
    return _pick(cfg, MotionConfig, ("tau_motion", "k_min", "rule", "grid_size"), **overrides)


def rollout_config_from_config(cfg: dict, **overrides) -> RolloutConfig:
    names = ("safe_progress_upper_bound", "ttc_threshold_s", "max_accel", "max_jerk")
    return _pick(cfg, RolloutConfig, names, **overrides)
