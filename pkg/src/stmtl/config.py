"""Flat JSON-backed run configuration shared by the model, trainer and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

MODES = ("early", "late", "det-only", "seg-only")
FLOW_MODES = ("gt", "diff", "zero")


@dataclass
class TrainConfig:
    # architecture
    mode: str = "late"
    frames: int = 2                 # temporal window T
    feat_dim: int = 64              # per-step hidden width d
    grid_h: int = 8
    grid_w: int = 8
    image_h: int = 64
    image_w: int = 64
    n_obj_queries: int = 100
    n_class_queries: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ff_dim: int = 0                 # 0 means 4 * frames * feat_dim
    decoder_query_self_attention: bool = True
    flow: str = "gt"
    # optimization
    epochs: int = 50
    batch_size: int = 4
    lr_warm_start: float = 1e-3
    lr_warm_end: float = 5e-3
    warm_epochs: int = 5
    lr_decay_start: float = 1e-3
    lr_decay_end: float = 1e-5
    clip_norm: float = 1.0
    # loss
    lambda_class: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    noobj_weight: float = 0.1
    w_det: float = 1.0
    w_seg: float = 1.0
    # bookkeeping
    seed: int = 0
    dataset: str = ""
    val_dataset: str = ""           # empty: evaluate on the training split
    out_dir: str = "run"
    eval_every: int = 5
    early_stop_ap50: float = 0.0    # 0 disables
    early_stop_seg_iou: float = 0.0

    # ---- derived -----------------------------------------------------------

    @property
    def model_dim(self) -> int:
        return self.frames * self.feat_dim

    @property
    def has_detection(self) -> bool:
        return self.mode in ("early", "late", "det-only")

    @property
    def has_segmentation(self) -> bool:
        return self.mode in ("early", "late", "seg-only")

    @property
    def feed_forward_dim(self) -> int:
        return self.ff_dim if self.ff_dim else 4 * self.model_dim

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.flow not in FLOW_MODES:
            raise ConfigError(f"flow must be one of {FLOW_MODES}, got {self.flow!r}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.has_segmentation and self.feat_dim != self.grid_h * self.grid_w:
            raise ConfigError(
                f"segmentation requires feat_dim == grid cells: feat_dim={self.feat_dim}, "
                f"grid={self.grid_h}x{self.grid_w}={self.grid_h * self.grid_w}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model dim {self.model_dim} not divisible by heads={self.heads}")
        if self.feed_forward_dim < self.model_dim:
            raise ConfigError(
                f"ff_dim {self.feed_forward_dim} must be >= model dim {self.model_dim}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.warm_epochs < 0:
            raise ConfigError(f"warm_epochs must be >= 0, got {self.warm_epochs}")
        return self

    # ---- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)

    @staticmethod
    def from_json_file(path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return TrainConfig.from_dict(raw)

    def apply_overrides(self, overrides: list[str]) -> "TrainConfig":
        """Apply "key=value" strings, coercing values to the field's type."""
        values = self.to_dict()
        fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            if key not in fields:
                raise ConfigError(f"unknown config key in override: {key!r}")
            kind = fields[key].type
            try:
                if kind in ("int", int):
                    values[key] = int(raw)
                elif kind in ("float", float):
                    values[key] = float(raw)
                elif kind in ("bool", bool):
                    if raw.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(raw)
                    values[key] = raw.lower() in ("true", "1")
                else:
                    values[key] = raw
            except ValueError as exc:
                raise ConfigError(f"override {key}={raw!r}: cannot parse as {kind}") from exc
        return TrainConfig.from_dict(values)
