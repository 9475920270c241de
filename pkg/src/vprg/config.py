"""Training/model configuration and its plaintext ``key = value`` file format.

Any field can be overridden from the environment as ``VPRG_<FIELD>`` (upper case),
for example ``VPRG_EPOCHS=5``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgumentError, ParseError

ENV_PREFIX = "VPRG_"


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    decay_factor: float = 0.8
    decay_every: int = 20
    batch_size: int = 16
    num_segments: int = 16
    q: int = 3
    margin: float = 0.2
    beta1: float = 0.04
    beta2: float = 0.04
    cmff_weights: tuple = (0.4, 0.3, 0.3)
    iou_min: float = 0.5
    iou_max: float = 1.0
    dim: int = 64
    heads: int = 4
    depth: int = 2
    rec_depth: int = 1
    tan_layers: int = 4
    positional: bool = True
    init_scale: float = 10.0
    unmasked_weight: float = 1.0
    # "reconstruction": rewards follow each candidate's reconstruction quality;
    # "score": rewards follow the score order the candidates were selected in.
    reward_order: str = "reconstruction"
    use_time: bool = True
    use_global: bool = True
    use_mse: bool = True
    mse_positives_only: bool = False
    mse_symmetric: bool = False
    fit_sync_heads: bool = True
    grad_clip: float = 10.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.cmff_weights = tuple(float(w) for w in self.cmff_weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        for name in ("epochs", "decay_every", "batch_size", "num_segments", "q", "dim", "heads",
                     "depth", "rec_depth", "tan_layers"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.base_lr < 0 or not 0 < self.decay_factor <= 1:
            raise InvalidArgumentError("learning-rate schedule out of range")
        if self.decay_every > self.epochs:
            raise InvalidArgumentError("decay_every must not exceed epochs")
        if not 0 < self.margin < 1:
            raise InvalidArgumentError("margin must lie in (0, 1)")
        if self.beta1 < 0 or self.beta2 < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if len(self.cmff_weights) != self.q:
            raise InvalidArgumentError("need one fusion weight per candidate")
        if not 0 <= self.iou_min < self.iou_max <= 1:
            raise InvalidArgumentError("need 0 <= iou_min < iou_max <= 1")
        if self.dim % self.heads:
            raise InvalidArgumentError("dim must be divisible by heads")
        if self.reward_order not in ("reconstruction", "score"):
            raise InvalidArgumentError(f"unknown reward_order {self.reward_order!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _convert(name, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(lineno, "expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ParseError(lineno, f"unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELDS:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = _convert(name, raw)
    return out


def load_config(path=None, environ=None, **overrides) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update(env_overrides(environ))
    values.update(overrides)
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
