"""Initial input embeddings for context lists.

Each node's modalities are projected to a shared width, mixed with learned
attention weights, and summed with a position embedding and a role
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .graph import FeatureStore
from .sampling import ContextList, Role


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class FusionParams:
    proj: list[Tensor]
    proj_bias: list[Tensor]
    attn: Tensor
    attn_bias: Tensor

    @classmethod
    def init(cls, dims: Sequence[int], width: int, rng: np.random.Generator) -> "FusionParams":
        m = len(dims)
        return cls(
            proj=[glorot(rng, d, width, f"fusion.proj.{i}") for i, d in enumerate(dims)],
            proj_bias=[zeros(width, f"fusion.proj_bias.{i}") for i in range(m)],
            attn=glorot(rng, m * width, m, "fusion.attn"),
            attn_bias=zeros(m, "fusion.attn_bias"),
        )

    @property
    def modality_count(self) -> int:
        return len(self.proj)

    def parameters(self) -> list[Tensor]:
        return [*self.proj, *self.proj_bias, self.attn, self.attn_bias]


@dataclass
class EmbeddingTables:
    position: Tensor
    role: Tensor

    @classmethod
    def init(cls, max_context: int, width: int, rng: np.random.Generator, std: float = 0.02):
        return cls(
            position=Tensor(rng.normal(0.0, std, (max_context + 1, width)), requires_grad=True, name="tables.position"),
            role=Tensor(rng.normal(0.0, std, (len(Role), width)), requires_grad=True, name="tables.role"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.position, self.role]


def fuse_modalities(features: Sequence, fusion: FusionParams) -> tuple[Tensor, Tensor]:
    """Attention-weighted mix of projected modalities.

    ``features[i]`` has shape ``(..., d_i)``; returns the fused ``(..., d_0)``
    representation and the ``(..., m)`` modality weights.
    """
    if len(features) != fusion.modality_count:
        raise ShapeError(f"got {len(features)} modalities, fusion expects {fusion.modality_count}")
    projected = [ad.matmul(x, w) + b for x, w, b in zip(features, fusion.proj, fusion.proj_bias)]
    logits = ad.matmul(ad.tanh(ad.concat(projected, axis=-1)), fusion.attn) + fusion.attn_bias
    alpha = ad.softmax(logits)
    fused = projected[0] * alpha[..., 0:1]
    for i in range(1, len(projected)):
        fused = fused + projected[i] * alpha[..., i : i + 1]
    return fused, alpha


@dataclass
class ContextBatch:
    """Padded, collated context lists ready for the encoder.

    ``features`` are the encoder inputs after masking; ``nodes`` holds -1 in
    pad slots.
    """

    nodes: np.ndarray
    features: list[np.ndarray]
    positions: np.ndarray
    roles: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return self.nodes.shape[0]


def collate(
    contexts: Sequence[ContextList],
    store: FeatureStore,
    length: int,
    plans: Sequence | None = None,
) -> ContextBatch:
    """Pad ``contexts`` to ``length`` slots and gather their features.

    ``plans`` optionally gives one mask plan per context; masked slots get
    zero features or a substitute node's features.
    """
    b = len(contexts)
    nodes = np.full((b, length), -1, dtype=np.int64)
    for r, ctx in enumerate(contexts):
        if len(ctx.nodes) > length:
            raise ShapeError(f"context of {len(ctx.nodes)} slots exceeds table length {length}")
        nodes[r, : len(ctx.nodes)] = ctx.nodes
    valid = nodes >= 0
    source = np.where(valid, nodes, 0)
    zero_rows = ~valid
    if plans is not None:
        source = source.copy()
        zero_rows = zero_rows.copy()
        for r, plan in enumerate(plans):
            if plan is None:
                continue
            for slot, replacement in plan.inputs():
                if replacement is None:
                    zero_rows[r, slot] = True
                else:
                    source[r, slot] = replacement
    features = []
    for matrix in store.matrices:
        x = matrix[source]
        x[zero_rows] = 0.0
        features.append(x)
    roles = np.where(valid, Role.CONTEXT, Role.PAD)
    roles[:, 0] = Role.TARGET
    positions = np.broadcast_to(np.arange(length), (b, length)).copy()
    return ContextBatch(nodes, features, positions, roles.astype(np.int64), valid)


def init_embeddings(batch: ContextBatch, fusion: FusionParams, tables: EmbeddingTables) -> Tensor:
    """``(B, length, d_0)`` input rows: fused features + position + role embeddings."""
    if batch.positions.size and batch.positions.max() >= tables.position.shape[0]:
        raise ShapeError(
            f"position {batch.positions.max()} outside table of {tables.position.shape[0]} rows"
        )
    fused, _ = fuse_modalities(batch.features, fusion)
    return fused + ad.gather_rows(tables.position, batch.positions) + ad.gather_rows(tables.role, batch.roles)


def embed_context(
    ctx: ContextList,
    store: FeatureStore,
    fusion: FusionParams,
    tables: EmbeddingTables,
    plan=None,
    length: int | None = None,
) -> Tensor:
    """Initial embedding matrix for a single context list."""
    length = len(ctx.nodes) if length is None else length
    batch = collate([ctx], store, length, None if plan is None else [plan])
    return init_embeddings(batch, fusion, tables)[0]
