"""Flat key=value experiment configuration with typed parsing and a stable
digest.

Precedence: command-line flag overrides > config file > defaults. The digest
covers only semantic keys (model/data/training), so renaming an output
directory or changing seed lists never invalidates a checkpoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .attention import AttentionConfig
from .encoder import PatchNetConfig
from .errors import ConfigError
from .model import ClassifierConfig, ModelConfig

# Keys that do not change the computed numbers.
NON_SEMANTIC = ("out",)


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    image_size: int = 32
    channels: int = 3
    classes: int = 10
    fraction: float = 1.0
    synthetic_n: int = 1000
    data_seed: int = 101    # dataset generation; independent of the model seed
    subset_seed: int = 0    # labeled-subset draw, shared across the seed protocol
    # patching
    ps: int = 8
    p: float = 0.75
    pad: int = -1  # -1 = auto: 4 for 32x32 inputs, else 0
    # patch network
    stem_channels: int = 16
    block_counts: tuple[int, ...] = (2, 2, 2)
    group_channels: tuple[int, ...] = (16, 32, 64)
    # attention pooling
    hidden: int = 128
    intermediate: int = 80
    heads: int = 4
    n_blocks: int = 2
    dropout: float = 0.1
    positional_mode: str = "auto"  # auto | flat | factorized
    encoder_positions: bool = True
    # classifier
    finetune_mode: str = "standard"  # standard | hybrid
    group4_channels: int = 128
    group4_blocks: int = 2
    # optimization
    batch_size: int = 64
    steps: int = 5000
    warmup: int = 100
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # bookkeeping
    eval_every: int = 200
    checkpoint_every: int = 1000
    eval_examples: int = 1000
    seed: int = 0
    out: str = "runs"

    # ------------------------------------------------------------------
    # parsing

    @classmethod
    def _field_types(cls) -> dict[str, type]:
        return {f.name: f.type for f in dataclasses.fields(cls)}

    @classmethod
    def _parse_value(cls, key: str, raw: str):
        default = getattr(cls(), key)
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw.strip()

    def apply(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """New config with string overrides parsed per-field."""
        known = self._field_types()
        values = dataclasses.asdict(self)
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = self._parse_value(key, raw) if isinstance(raw, str) else raw
        return ExperimentConfig(**values)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        overrides: dict[str, str] = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                overrides[key.strip()] = raw.strip()
        return cls().apply(overrides)

    # ------------------------------------------------------------------
    # derived values

    def digest(self) -> str:
        items = []
        for f in dataclasses.fields(self):
            if f.name in NON_SEMANTIC:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            items.append(f"{f.name}={value}")
        blob = "\n".join(sorted(items)).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def grid_shape(self) -> tuple[int, int]:
        if self.image_size % self.ps:
            raise ConfigError(f"ps={self.ps} does not divide image size {self.image_size}")
        g = self.image_size // self.ps
        return (g, g)

    def resolved_pad(self) -> int:
        if self.pad >= 0:
            return self.pad
        return 4 if self.image_size == 32 else 0

    def resolved_positional_mode(self) -> str:
        if self.positional_mode != "auto":
            return self.positional_mode
        rows, cols = self.grid_shape
        return "flat" if rows * cols <= 16 else "factorized"

    def patch_net_config(self) -> PatchNetConfig:
        return PatchNetConfig(stem_channels=self.stem_channels,
                              block_counts=self.block_counts,
                              group_channels=self.group_channels,
                              ps=self.ps, in_channels=self.channels)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(n_blocks=self.n_blocks, hidden=self.hidden,
                               intermediate=self.intermediate, heads=self.heads,
                               dropout_rate=self.dropout)

    def model_config(self) -> ModelConfig:
        return ModelConfig(patch_net=self.patch_net_config(),
                           attention=self.attention_config(),
                           grid_shape=self.grid_shape,
                           positional_mode=self.resolved_positional_mode(),
                           encoder_positions=self.encoder_positions)

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(patch_net=self.patch_net_config(),
                                classes=self.classes, mode=self.finetune_mode,
                                group4_blocks=self.group4_blocks,
                                group4_channels=self.group4_channels,
                                attention=self.attention_config(),
                                grid_shape=self.grid_shape,
                                positional_mode=self.resolved_positional_mode(),
                                encoder_positions=self.encoder_positions)
