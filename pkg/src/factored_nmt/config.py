"""Run configuration: presets, flat key=value config files, flag overrides.

Precedence, lowest to highest: dataclass defaults, preset values, config
file values, command-line flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

from .model import Arch, Combine, ConfigError, FactorSpec, ModelConfig
from .training import TrainConfig

# Published hyperparameter sets for the two benchmark setups this toolkit
# mirrors. The de-en set: 6+6 layers, 4 heads, width 512, feedforward 1024,
# dropout 0.3, smoothing 0.1. The en-ne set: 5+5 layers, 2 heads, width 512,
# feedforward 2048, smoothing 0.2. Both train with 4000-token batches.
PRESETS: Dict[str, Dict] = {
    "iwslt-de-en": dict(
        layers_enc=6,
        layers_dec=6,
        heads=4,
        d_model=512,
        d_ffn=1024,
        dropout=0.3,
        label_smoothing=0.1,
        token_batch=4000,
    ),
    "flores-en-ne": dict(
        layers_enc=5,
        layers_dec=5,
        heads=2,
        d_model=512,
        d_ffn=2048,
        label_smoothing=0.2,
        token_batch=4000,
    ),
}


@dataclass
class RunConfig:
    # architecture
    arch: str = "1enc"
    combine: str = "sum"
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 2
    d_model: int = 64
    d_ffn: int = 128
    dropout: float = 0.1
    max_len: int = 256
    factor_dims: Dict[str, int] = field(default_factory=dict)
    # training
    token_batch: int = 4000
    label_smoothing: float = 0.1
    lr: float = 2e-3
    warmup_steps: int = 400
    max_steps: int = 1000
    seed: int = 1
    eval_every: int = 100
    vocab_threshold: int = 0
    # decoding
    beam: int = 4
    length_penalty: bool = True
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            token_batch=self.token_batch,
            label_smoothing=self.label_smoothing,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            max_steps=self.max_steps,
            seed=self.seed,
            eval_every=self.eval_every,
        )

    def model_config(self, factor_vocab_sizes: Dict[str, int], tgt_vocab_size: int) -> ModelConfig:
        """Expand to a ModelConfig for the factors present in the data.

        ``factor_vocab_sizes`` must list the word stream under ``words``
        first; declaration order fixes the combination order.
        """
        combine = Combine(self.combine)
        specs = []
        for name, vocab_size in factor_vocab_sizes.items():
            if name in self.factor_dims:
                dim = self.factor_dims[name]
            elif combine is Combine.SUM:
                dim = self.d_model
            else:
                raise ConfigError(
                    f"concatenation requires an explicit embedding size for factor {name!r} "
                    "(--factor-dims name=int)"
                )
            specs.append(FactorSpec(name, vocab_size, dim))
        return ModelConfig(
            factors=tuple(specs),
            tgt_vocab_size=tgt_vocab_size,
            arch=Arch(self.arch),
            combine=combine,
            layers_enc=self.layers_enc,
            layers_dec=self.layers_dec,
            heads=self.heads,
            d_model=self.d_model,
            d_ffn=self.d_ffn,
            dropout=self.dropout,
            max_len=self.max_len,
        )


def _parse_value(field_obj: dataclasses.Field, raw: str):
    typ = field_obj.type
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid boolean for {field_obj.name!r}: {raw!r}")
    if field_obj.name == "factor_dims":
        return parse_factor_dims(raw)
    return raw


def parse_factor_dims(raw: str) -> Dict[str, int]:
    """Parse "name=int,name=int" (also accepted one pair at a time)."""
    dims: Dict[str, int] = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"expected name=int in factor dims, got {part!r}")
        name, value = part.split("=", 1)
        dims[name.strip()] = int(value)
    return dims


def read_config_file(path) -> Dict[str, object]:
    """Flat "key = value" lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: Dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(fields[key], value)
    return values


def expand_config(
    preset: Optional[str] = None,
    file_values: Optional[Dict[str, object]] = None,
    flag_values: Optional[Dict[str, object]] = None,
) -> RunConfig:
    """Layer preset, config file, and flags over the defaults."""
    merged: Dict[str, object] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
        merged["preset"] = preset
    for layer in (file_values, flag_values):
        if layer:
            merged.update({k: v for k, v in layer.items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, dict):
            value = ",".join(f"{k}={v}" for k, v in value.items())
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines)
