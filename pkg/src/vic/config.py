"""Architecture and optimisation settings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_h: int = 28
    image_w: int = 28
    image_channels: int = 1
    patch_h: int = 4
    patch_w: int = 4
    embed_dim: int = 256
    num_blocks: int = 3
    num_heads: int = 4
    conv_layers: int = 1
    conv_filters: int = 32
    conv_kernel: int = 3
    mlp_hidden: int = 1024
    num_classes: int = 10
    # "normed": the patch-path residual adds the LN2 output the path consumed;
    # "block_input": it adds the block input instead
    patch_residual: str = "normed"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, int) or isinstance(v, bool)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        positive = [f.name for f in fields(self) if f.type == "int" and f.name not in ("num_blocks", "conv_layers")]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.conv_layers < 1:
            raise ConfigError("conv_layers must be >= 1")
        if self.image_h % self.patch_h or self.image_w % self.patch_w:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible into {self.patch_h}x{self.patch_w} patches"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd so that same-padding preserves the feature map size")
        if self.patch_residual not in ("normed", "block_input"):
            raise ConfigError("patch_residual must be 'normed' or 'block_input'")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_h, self.image_w // self.patch_w

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.image_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 500
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("learning_rate and eps must be positive, weight_decay non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def from_dict(cls, data: dict):
    """Build ``cls`` from ``data``, rejecting unknown keys with the list of valid ones."""
    valid = [f.name for f in fields(cls)]
    unknown = sorted(set(data) - set(valid))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s) {unknown}; valid keys: {valid}")
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in data.items():
        conv = _COERCE.get(types[key])
        if conv is not None and not isinstance(value, bool):
            try:
                value = conv(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{cls.__name__}.{key}: expected {types[key]}, got {value!r}") from None
        out[key] = value
    return cls(**out)


def _as_int(value) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(value)
    return int(value)


# YAML 1.1 reads e.g. "1e-08" as a string, so numeric fields are coerced explicitly
_COERCE = {"int": _as_int, "float": float}
