"""Run configuration: defaults, flat ``key = value`` files, and flag overrides.

Recognised keys (unknown keys are rejected)::

    dim            latent width d_0                        (128)
    depth          sampling depth K                        (3)
    sizes          per-step sampling sizes n_1..n_K        (16,8,4)
    context_size   contextual neighbours S                 (10)
    layers         encoder layers L                        (2)
    beta           diversity-attention weight, in [0, 1]   (0.5)
    lambda         feature-loss weight                     (1.0)
    neg_count      negatives per positive pair             (5)
    learning_rate  Adam step size                          (0.001)
    batch_size     targets per step                        (32)
    steps          optimisation steps                      (1000)
    seed           master seed, >= 0                       (0)
    clip_grad      clip global grad norm at 5.0            (false)
    threads        context-sampling workers                (1)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .sampling import SamplerConfig

CLIP_NORM = 5.0

_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    dim: int = 128
    depth: int = 3
    sizes: tuple[int, ...] = (16, 8, 4)
    context_size: int = 10
    layers: int = 2
    beta: float = 0.5
    lam: float = 1.0
    neg_count: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    clip_grad: bool = False
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(self.sizes))
        for name in ("dim", "depth", "context_size", "layers", "neg_count", "batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if len(self.sizes) != self.depth or any(n < 1 for n in self.sizes):
            raise ConfigError(f"sizes must list {self.depth} counts >= 1, got {self.sizes}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a non-negative 64-bit integer, got {self.seed}")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.depth, self.sizes, self.context_size, self.seed)

    def model_config(self, modality_dims) -> ModelConfig:
        return ModelConfig(tuple(modality_dims), self.dim, self.context_size, self.layers, self.beta)

    @property
    def clip_norm(self) -> float | None:
        return CLIP_NORM if self.clip_grad else None

    def items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            key = {v: k for k, v in _ALIASES.items()}.get(f.name, f.name)
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            out.append((key, str(value)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _field_name(key: str) -> str:
    key = key.strip().replace("-", "_")
    name = _ALIASES.get(key, key)
    if name not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        name = _field_name(key)
        values[name] = _coerce(name, raw)
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then non-None ``overrides``.

    If the file changes ``depth`` without ``sizes`` the sizes must be set too.
    """
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        name = _field_name(key)
        values[name] = _coerce(name, raw) if isinstance(raw, str) else raw
    try:
        return dataclasses.replace(RunConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
