"""Experiment configuration.

`SymSegConfig` is a flat dataclass serialized as JSON with a schema version
field. The config hash is the SHA-256 of the canonical JSON encoding and is
stamped into checkpoints, manifests and run artifacts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

SCHEMA_VERSION = 1

WIDTH_PRESETS = {
    "toy": {"base_width": 16, "depth": 3},
    "full": {"base_width": 64, "depth": 4},
}


@dataclass
class SymSegConfig:
    schema_version: int = SCHEMA_VERSION
    # architecture
    backbone: str = "unet"
    base_width: int = 64
    depth: int = 4
    in_channels: int = 1
    deep_supervision: bool = False
    symbolic: bool = True
    feature_source: str = "logits"  # "logits" | "features"
    # emergent-language channel
    n_symbols: int = 8
    vocab_size: int = 1000
    embed_dim: int = 512
    temperature: float = 1.0
    hard_mode: bool = False
    sender_layers: int = 2
    receiver_layers: int = 1
    # optimisation
    optimizer: str = "adam"  # "adam" | "sgd"
    lr: float = 5e-5
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.1
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    augment: bool = True
    rotation_deg: float = 5.0
    scale_range: tuple[float, float] = (0.97, 1.03)
    # data
    image_size: int = 400
    margin: int = 20
    n_train: int = 500
    n_test: int = 100
    split_seed: int = 0
    seed: int = 0
    # interpretation
    analyzed_positions: int = 4
    regression_split: str = "test"  # "test" | "all"
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.scale_range, list):
            self.scale_range = tuple(self.scale_range)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.schema_version == SCHEMA_VERSION, f"unsupported schema_version {self.schema_version}"),
            (self.n_symbols >= 1, "n_symbols (N_S) must be >= 1"),
            (self.vocab_size >= 2, "vocab_size (V) must be >= 2"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.patience >= 0, "patience must be >= 0"),
            (0.0 <= self.val_fraction < 1.0, "val_fraction must be in [0, 1)"),
            (self.base_width >= 1 and self.depth >= 1, "base_width and depth must be positive"),
            (self.sender_layers >= 1 and self.receiver_layers >= 1, "LSTM depth must be >= 1"),
            (self.feature_source in ("logits", "features"), f"unknown feature_source {self.feature_source!r}"),
            (self.optimizer in ("adam", "sgd"), f"unknown optimizer {self.optimizer!r}"),
            (self.regression_split in ("test", "all"), f"unknown regression_split {self.regression_split!r}"),
            (self.image_size % (2 ** self.depth) == 0,
             f"image_size {self.image_size} must be divisible by 2**depth = {2 ** self.depth}"),
            (self.analyzed_positions >= 1, "analyzed_positions must be >= 1"),
            (len(self.scale_range) == 2 and 0 < self.scale_range[0] <= self.scale_range[1], "bad scale_range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def desk(cls, **overrides) -> "SymSegConfig":
        """Toy-width preset for laptop-scale phantom runs."""
        params = dict(WIDTH_PRESETS["toy"], image_size=128, lr=1e-3, epochs=10, patience=20)
        params.update(overrides)
        return cls(**params)

    def replace(self, **changes) -> "SymSegConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SymSegConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SymSegConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SymSegConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_json(p.read_text())

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
