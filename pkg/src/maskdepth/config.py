"""Flat key=value run configuration.

One dataclass holds every tunable. Files are plain ``key=value`` lines with
``#`` comments; unknown keys are rejected rather than ignored, and floats are
written with ``repr`` so a save/load cycle reproduces the exact values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .masks import MASK_MODES

LOSS_KINDS = ("l1", "l2")
DTYPES = ("float32", "float64")
DOWNSAMPLE_MODES = ("bilinear", "nearest")


@dataclass
class Config:
    # geometry
    height: int = 256
    width: int = 512
    max_depth: float = 80.0

    # network widths
    base_channels: int = 8          # first encoder level; doubles per level
    depth_channels: int = 8         # decoder output (depth feature) channels
    attention_channels: int = 32    # Q/K/V projection width
    fusion_channels: int = 128
    head_channels: int = 64
    se_reduction: int = 16
    attention_height: int = 16
    attention_width: int = 32
    attention_enabled: bool = True

    # segmentation input
    mask_mode: str = "ground_truth"
    mask_file: str = "pred_mask.pgm"
    mask_downsample: str = "bilinear"

    # sparsification
    keep_prob: float = 0.05
    resample_sparsity: bool = False

    # loss
    lambda_init: float = 0.5
    lambda_obj: float = 3.0
    lambda_seg: float = 1.0
    loss_kind: str = "l1"

    # optimization
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 500
    seed: int = 0
    log_every: int = 25
    dtype: str = "float32"

    def validate(self) -> "Config":
        if self.height % 16 or self.width % 16:
            raise ValueError(
                f"height and width must be divisible by 16 (four pooling "
                f"levels), got {self.height}x{self.width}")
        if self.height < 16 or self.width < 16:
            raise ValueError(f"size {self.height}x{self.width} below minimum 16x16")
        if self.max_depth <= 0:
            raise ValueError(f"max_depth must be positive, got {self.max_depth}")
        for name in ("base_channels", "depth_channels", "attention_channels",
                     "fusion_channels", "head_channels", "se_reduction",
                     "attention_height", "attention_width", "batch_size",
                     "steps", "log_every"):
            v = getattr(self, name)
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.attention_height > self.height or self.attention_width > self.width:
            raise ValueError(
                f"attention grid {self.attention_height}x{self.attention_width} "
                f"exceeds input {self.height}x{self.width}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mask_downsample not in DOWNSAMPLE_MODES:
            raise ValueError(
                f"mask_downsample must be one of {DOWNSAMPLE_MODES}, "
                f"got {self.mask_downsample!r}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in [0, 1], got {self.keep_prob}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("lambda_init", "lambda_obj", "lambda_seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(field: dataclasses.Field, raw: str, source: str):
    if field.type in ("bool", bool):
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ValueError(f"{source}: {field.name} must be true or false, got {raw!r}")
    if field.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{source}: {field.name} expects an integer, got {raw!r}") from None
    if field.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{source}: {field.name} expects a number, got {raw!r}") from None
    return raw


def config_to_text(cfg: Config) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(Config)]
    return "\n".join(lines) + "\n"


def config_from_items(items: dict, source: str = "config",
                      base: Config | None = None) -> Config:
    """Build a Config from string key/value pairs; unknown keys rejected."""
    fields = {f.name: f for f in dataclasses.fields(Config)}
    cfg = dataclasses.replace(base) if base is not None else Config()
    for key, raw in items.items():
        if key not in fields:
            raise ValueError(f"{source}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(fields[key], str(raw), source))
    return cfg.validate()


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(config_to_text(cfg))


def load_config(path, base: Config | None = None) -> Config:
    items = {}
    with open(path, "r", encoding="ascii") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {ln} is not key=value: {line!r}")
            key, value = line.split("=", 1)
            items[key.strip()] = value.strip()
    return config_from_items(items, source=str(path), base=base)
