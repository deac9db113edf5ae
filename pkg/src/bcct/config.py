"""Run configuration: a flat JSON document with typo-safe parsing.

Desk-scale defaults are tuned to train in minutes on one CPU core. The
schedule used at full dataset scale (224px images, 100 epochs, lr 1e-4 for
the feature extractor and 1e-3 for the heads, both divided by 10 every 20
epochs) is kept here as reference constants; it is not what this artifact
runs by default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

# Full-scale reference schedule (documented, not the desk defaults).
FULL_SCALE_EPOCHS = 100
FULL_SCALE_LR_BACKBONE = 0.0001
FULL_SCALE_LR_HEAD = 0.001
FULL_SCALE_LR_DECAY_FACTOR = 0.1
FULL_SCALE_LR_DECAY_PERIOD = 20

MOMENTUM = 0.9  # fixed, not configurable


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 1
    precision: str = "f32"           # f32 | f64
    batch_size: int = 32
    pretrain_epochs: int = 6
    bc_epochs: int = 20
    joint_epochs: int = 8
    lr_backbone: float = 0.01
    lr_head: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 4
    delta: float = 0.8               # mask threshold, relative to max(G)
    lambda_mask: float = 1.0         # 0 recovers the plain-CAM baseline
    full_bce: bool = False           # add the negative-pixel term to the mask loss
    aug_crop: bool = True
    aug_flip: bool = True
    aug_color: bool = True
    masks_on_augmented: bool = False  # ablation: compute masks per batch on augmented views
    grad_reduce: str = "max_abs"      # max_abs | mean_abs channel reduction
    grad_normalize: str = "smoothed_rank"  # smoothed_rank | rank | none, applied before thresholding
    grad_blur_radius: int = 0         # extra pre-normalization blur, ablation only
    eval_tau: float | None = None     # CAM binarization threshold; None -> delta
    iou_geq: bool = False             # count IoU == 0.5 as correct
    bc_warmup_epochs: int = 0         # extra inline BC-head epochs before joint training

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got '{self.precision}'")
        for name in ("pretrain_epochs", "bc_epochs", "joint_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_backbone", "lr_head"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_period < 1:
            raise ConfigError(f"lr_decay_period must be >= 1, got {self.lr_decay_period}")
        if not (0.0 < self.delta <= 1.0):
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.lambda_mask < 0:
            raise ConfigError(f"lambda_mask must be >= 0, got {self.lambda_mask}")
        if self.grad_reduce not in ("max_abs", "mean_abs"):
            raise ConfigError(f"grad_reduce must be 'max_abs' or 'mean_abs', got '{self.grad_reduce}'")
        if self.grad_normalize not in ("smoothed_rank", "rank", "none"):
            raise ConfigError(
                f"grad_normalize must be 'smoothed_rank', 'rank' or 'none', got '{self.grad_normalize}'")
        if self.grad_blur_radius < 0:
            raise ConfigError(f"grad_blur_radius must be >= 0, got {self.grad_blur_radius}")
        if self.eval_tau is not None and not (0.0 < self.eval_tau <= 1.0):
            raise ConfigError(f"eval_tau must lie in (0, 1], got {self.eval_tau}")
        if self.bc_warmup_epochs < 0:
            raise ConfigError(f"bc_warmup_epochs must be >= 0, got {self.bc_warmup_epochs}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def tau(self) -> float:
        return self.delta if self.eval_tau is None else self.eval_tau

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a config from a parsed JSON object; unknown keys and wrong types
    are rejected by name."""
    known = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        kwargs[key] = _check_type(key, value)
    return TrainConfig(**kwargs)


def _check_type(key, value):
    checks = {
        "seed": (int, "integer"),
        "precision": (str, "string"),
        "batch_size": (int, "integer"),
        "pretrain_epochs": (int, "integer"),
        "bc_epochs": (int, "integer"),
        "joint_epochs": (int, "integer"),
        "lr_backbone": ((int, float), "number"),
        "lr_head": ((int, float), "number"),
        "lr_decay_factor": ((int, float), "number"),
        "lr_decay_period": (int, "integer"),
        "delta": ((int, float), "number"),
        "lambda_mask": ((int, float), "number"),
        "full_bce": (bool, "boolean"),
        "aug_crop": (bool, "boolean"),
        "aug_flip": (bool, "boolean"),
        "aug_color": (bool, "boolean"),
        "masks_on_augmented": (bool, "boolean"),
        "grad_reduce": (str, "string"),
        "grad_normalize": (str, "string"),
        "grad_blur_radius": (int, "integer"),
        "eval_tau": ((int, float, type(None)), "number or null"),
        "iou_geq": (bool, "boolean"),
        "bc_warmup_epochs": (int, "integer"),
    }
    expected, label = checks[key]
    if isinstance(value, bool) and expected in (int, (int, float)):
        raise ConfigError(f"config key '{key}' expects {label}, got boolean")
    if not isinstance(value, expected):
        raise ConfigError(f"config key '{key}' expects {label}, got {type(value).__name__}")
    return value


def load_config(path) -> TrainConfig:
    """Parse a JSON config file, filling defaults for absent keys."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)
