"""Model/training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .encoder import EncoderConfig
from .model import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_vertices: int = 16
    decoder_width: int = 32
    variant: str = "B+D+T"
    seed: int = 0
    learning_rate: float = 1e-4
    lr_decay_epochs: int = 50
    lr_decay_factor: float = 10.0
    epochs: int = 200
    batch_size: int = 2
    # 0 means "no cap"; otherwise training stops after this many optimizer steps
    max_steps: int = 0
    augment: bool = True
    checkpoint_every: int = 0

    def validate(self) -> None:
        try:
            self.encoder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.encoder.num_layers != 12:
            raise ConfigError(f"num_layers must be 12, got {self.encoder.num_layers}")
        if self.encoder.embed_dim % 2:
            raise ConfigError("embed_dim must be even")
        for key in ("n_vertices", "decoder_width", "lr_decay_epochs", "batch_size"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("learning_rate", "lr_decay_factor"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("epochs", "max_steps", "checkpoint_every", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.n_vertices > self.encoder.seq_len:
            raise ConfigError(f"n_vertices {self.n_vertices} exceeds token count {self.encoder.seq_len}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate / self.lr_decay_factor ** (epoch // self.lr_decay_epochs)

    # -- flat text form --------------------------------------------------------------

    def flat(self) -> dict:
        out = dataclasses.asdict(self.encoder)
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "encoder"})
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())

    @classmethod
    def from_flat(cls, values: dict) -> "ModelConfig":
        enc_types = {f.name: f.type for f in fields(EncoderConfig)}
        top_types = {f.name: f.type for f in fields(cls) if f.name != "encoder"}
        enc_kw, top_kw = {}, {}
        for key, raw in values.items():
            if key in enc_types:
                enc_kw[key] = _coerce(key, raw, enc_types[key])
            elif key in top_types:
                top_kw[key] = _coerce(key, raw, top_types[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(encoder=EncoderConfig(**enc_kw), **top_kw)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = raw
        return cls.from_flat(values)

    @classmethod
    def load(cls, path: str) -> "ModelConfig":
        try:
            with open(path) as fh:
                return cls.parse(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale setup for the 8-sample overfitting experiment."""
    cfg = ModelConfig(
        learning_rate=5e-3,
        lr_decay_epochs=1000,
        batch_size=8,
        epochs=1000,
        max_steps=500,
        augment=False,
    )
    for key, value in overrides.items():
        if hasattr(cfg.encoder, key):
            setattr(cfg.encoder, key, value)
        else:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg
