"""Parameter container and batched forward pass of the graph encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import ContextBatch, EmbeddingTables, FusionParams, glorot, init_embeddings
from .encoder import EncoderLayerParams, encode
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    modality_dims: tuple[int, ...]
    dim: int = 128
    context_size: int = 10
    layers: int = 2
    beta: float = 0.5
    ffn_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        if not self.modality_dims or min(self.modality_dims) < 1:
            raise ConfigError(f"need at least one modality with dim >= 1, got {self.modality_dims}")
        if self.dim < 1 or self.context_size < 1 or self.layers < 1 or self.ffn_mult < 1:
            raise ConfigError("dim, context_size, layers and ffn_mult must all be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_dims"] = list(self.modality_dims)
        return d


class ModelParams:
    def __init__(self, config: ModelConfig, fusion, tables, layers, heads):
        self.config = config
        self.fusion: FusionParams = fusion
        self.tables: EmbeddingTables = tables
        self.layers: list[EncoderLayerParams] = layers
        self.heads: list[Tensor] = heads

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        d = config.dim
        return cls(
            config,
            FusionParams.init(config.modality_dims, d, rng),
            EmbeddingTables.init(config.context_size, d, rng),
            [EncoderLayerParams.init(d, rng, f"layer{i}", config.ffn_mult) for i in range(config.layers)],
            [glorot(rng, d, di, f"recon.{i}") for i, di in enumerate(config.modality_dims)],
        )

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "fusion": self.fusion.parameters(),
            "tables": self.tables.parameters(),
            "encoder": [p for layer in self.layers for p in layer.parameters()],
            "recon": list(self.heads),
        }

    def parameters(self) -> list[Tensor]:
        return [p for group in self.groups().values() for p in group]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            value = state[name]
            if value.shape != p.shape:
                raise ConfigError(f"parameter {name}: stored shape {value.shape}, model expects {p.shape}")
            p.data[...] = value


def forward(params: ModelParams, batch: ContextBatch) -> Tensor:
    """Encode a collated batch; returns the final layer, ``(B, length, d_0)``."""
    h0 = init_embeddings(batch, params.fusion, params.tables)
    return encode(h0, params.layers, params.config.beta, batch.valid)


def reconstruct(hl: Tensor, params: ModelParams) -> list[Tensor]:
    """Per-modality feature predictions from encoder outputs."""
    return [ad.matmul(hl, w) for w in params.heads]
