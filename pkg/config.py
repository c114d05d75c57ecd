"""Model and training configuration: `key = value` files plus `--override k=v` flags."""

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    d_model: int = 128
    d_ff: int = 512
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    dropout: float = 0.3
    d_e: Optional[int] = None
    rel_clip: int = 16
    lrm_after_layer: int = 2
    lrm_count: int = 1
    lrm_embedding: str = "soft"
    lrm_shared_classifier: bool = True
    lrm_frozen_zero: bool = False
    ffn_activation: str = "relu"
    alpha: float = 0.35
    lambda_: float = 0.75
    # label-space sizes, filled in from the vocabulary
    d_i: int = 0
    d_s: int = 0
    n_tokens: int = 0
    n_slot_vocab: int = 0

    @property
    def lrm_layers(self):
        """1-based encoder layers followed by an LRM."""
        return tuple(range(self.lrm_after_layer, self.lrm_after_layer + self.lrm_count))

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads", f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_e is not None and self.d_e != self.d_model:
            raise ConfigError("d_e", "d_e must equal d_model")
        if self.lrm_count < 0:
            raise ConfigError("lrm_count", "must be >= 0")
        if self.lrm_count and not (1 <= self.lrm_after_layer and self.lrm_layers[-1] < self.n_enc_layers):
            raise ConfigError("lrm_after_layer", f"LRM placement {self.lrm_layers} must lie inside 1..{self.n_enc_layers - 1}")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha", "must satisfy 0 <= alpha < 1")
        if self.lambda_ < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.lrm_embedding not in ("soft", "argmax"):
            raise ConfigError("lrm_embedding", "must be 'soft' or 'argmax'")
        if self.ffn_activation not in ("relu", "gelu"):
            raise ConfigError("ffn_activation", "must be 'relu' or 'gelu'")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout", "must satisfy 0 <= dropout < 1")
        if self.rel_clip < 0:
            raise ConfigError("rel_clip", "must be >= 0")
        return self

    def with_vocab(self, vocab):
        return dataclasses.replace(
            self,
            d_i=vocab.num_intents,
            d_s=vocab.num_slot_labels,
            n_tokens=len(vocab.tokens),
            n_slot_vocab=len(vocab.slots),
        )

    def to_dict(self):
        return to_public_dict(self)


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 13
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    max_len: int = 64
    bucket_size: int = 50
    log_every: int = 50

    def validate(self):
        for key in ("max_epochs", "batch_size", "max_len", "bucket_size"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        return self

    def to_dict(self):
        return to_public_dict(self)


def public_key(name):
    return "lambda" if name == "lambda_" else name


def field_name(key):
    return "lambda_" if key == "lambda" else key


def to_public_dict(obj):
    return {public_key(k): v for k, v in dataclasses.asdict(obj).items()}


def coerce(raw, hint, key):
    if typing.get_origin(hint) is typing.Union:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
        if raw.lower() in ("none", ""):
            return None
    try:
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return hint(raw.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {hint.__name__} for key") from None


def parse_pairs(lines, source):
    pairs = []
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{number}: expected key = value, got")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(pairs, model_cfg, train_cfg):
    model_hints = typing.get_type_hints(ModelConfig)
    train_hints = typing.get_type_hints(TrainConfig)
    for key, value in pairs:
        name = field_name(key)
        if name in model_hints:
            setattr(model_cfg, name, coerce(value, model_hints[name], key))
        elif name in train_hints:
            setattr(train_cfg, name, coerce(value, train_hints[name], key))
        else:
            raise ConfigError(key)


def load_config(path=None, overrides=()):
    """File values first, then overrides; returns validated (ModelConfig, TrainConfig)."""
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        apply_pairs(parse_pairs(text.splitlines(), str(path)), model_cfg, train_cfg)
    apply_pairs(parse_pairs(overrides, "--override"), model_cfg, train_cfg)
    return model_cfg.validate(), train_cfg.validate()


def model_config_from_dict(payload):
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for key, value in payload.items():
        name = field_name(key)
        if name not in known:
            raise ConfigError(key)
        kwargs[name] = value
    return ModelConfig(**kwargs)


def dump_config(model_cfg, train_cfg):
    return json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True)
