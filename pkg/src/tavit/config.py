"""Run configuration stored as plain-text ``key = value`` lines.

Blank lines and ``#`` comments are ignored. Tuples are comma-separated.
Command-line flags override file values; the effective config is written
beside every output as ``config.txt``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .models import ModelConfig
from .nn import TransformerConfig
from .train import TrainPlan

VARIANTS = ("mprvit", "tavit-t1w", "tavit-t1w-flair")
BASELINE_VARIANT = "tavit-t1w-flair"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    # dataset
    patients: int = 64
    slices: int = 32
    image_size: int = 64
    tumor_prob: float = 0.9
    split: tuple[float, ...] = (0.75, 0.125, 0.125)
    # model
    channels: tuple[int, ...] = (64, 128, 256)
    strides: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 256
    heads: int = 8
    layers: int = 4
    mlp_ratio: int = 4
    patch: int = 1
    attention: str = "tiled"
    attn_tile: int = 64
    layernorm_sqrt: bool = False
    # training
    epochs: int = 20
    seg_epochs: int = 0
    latent_epochs: int = 0
    batch_size: int = 8
    patience: int = 10
    lr: float = 2e-4
    weight_decay: float = 1e-2
    augment: bool = True
    train_slices_per_patient: int = 0
    val_slices_per_patient: int = 0
    variant: str = BASELINE_VARIANT

    def validate(self) -> None:
        if self.patients < 3:
            raise ConfigError("patients must be at least 3 (one per split)")
        if self.slices < 1 or self.image_size < 4:
            raise ConfigError("slices must be positive and image_size at least 4")
        if not 0.0 <= self.tumor_prob <= 1.0:
            raise ConfigError("tumor_prob must lie in [0, 1]")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-6 or min(self.split) < 0:
            raise ConfigError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.seg_epochs, self.latent_epochs, self.train_slices_per_patient, self.val_slices_per_patient) < 0:
            raise ConfigError("epoch and slice overrides must be non-negative")
        try:
            self.model_config("segmentation").validate()
            self.plan("synthesis").validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # derived configs -------------------------------------------------------

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(
            embed_dim=self.embed_dim, heads=self.heads, layers=self.layers, mlp_ratio=self.mlp_ratio,
            patch=self.patch, attention=self.attention, attn_tile=self.attn_tile,
            layernorm_sqrt=self.layernorm_sqrt)

    def model_config(self, role: str) -> ModelConfig:
        """Model for ``role``: segmentation, latent, or one of the synthesis variants."""
        if role == "segmentation":
            in_ch, cond, seed_tag = 2, "none", 1
        elif role == "latent":
            in_ch, cond, seed_tag = 1, "none", 2
        elif role in VARIANTS:
            in_ch = 1 if role == "tavit-t1w" else 2
            cond = "none" if role == "mprvit" else "adaln_zero"
            seed_tag = 3
        else:
            raise ConfigError(f"unknown model role {role!r}")
        return ModelConfig(
            in_channels=in_ch, image_size=self.image_size, channels=tuple(self.channels),
            strides=tuple(self.strides), conditioning=cond, latent_channels=self.channels[-1],
            seed=self.seed * 16 + seed_tag, transformer=self.transformer())

    def plan(self, stage: str) -> TrainPlan:
        epochs = {"segmentation": self.seg_epochs, "latent": self.latent_epochs}.get(stage, 0) or self.epochs
        return TrainPlan(stage=stage, epochs=epochs, batch_size=self.batch_size, patience=self.patience,
                         augment=self.augment, lr=self.lr, weight_decay=self.weight_decay, seed=self.seed,
                         slices_per_patient=self.train_slices_per_patient)

    # serialization ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p) for p in text.split(",") if p.strip())
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config(text: str) -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, val)
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    values = {}
    if path:
        try:
            values = parse_config(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    for k in values:
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
