"""Transformer encoder with diversity-promoting attention.

Each layer mixes ordinary scaled dot-product attention with a second
attention map whose logits are ``1 - cos(s_i, s_j) + [i == j]`` over a
learned projection ``s``, so similar pairs attend to each other less.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import glorot, zeros

COSINE_FLOOR = 1e-12


@dataclass
class EncoderLayerParams:
    query: Tensor
    key: Tensor
    value: Tensor
    similarity: Tensor
    ffn_in: Tensor
    ffn_in_bias: Tensor
    ffn_out: Tensor
    ffn_out_bias: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, prefix: str = "layer", ffn_mult: int = 4):
        inner = ffn_mult * width
        return cls(
            query=glorot(rng, width, width, f"{prefix}.query"),
            key=glorot(rng, width, width, f"{prefix}.key"),
            value=glorot(rng, width, width, f"{prefix}.value"),
            similarity=glorot(rng, width, width, f"{prefix}.similarity"),
            ffn_in=glorot(rng, width, inner, f"{prefix}.ffn_in"),
            ffn_in_bias=zeros(inner, f"{prefix}.ffn_in_bias"),
            ffn_out=glorot(rng, inner, width, f"{prefix}.ffn_out"),
            ffn_out_bias=zeros(width, f"{prefix}.ffn_out_bias"),
            norm1_gain=Tensor(np.ones(width), requires_grad=True, name=f"{prefix}.norm1_gain"),
            norm1_bias=zeros(width, f"{prefix}.norm1_bias"),
            norm2_gain=Tensor(np.ones(width), requires_grad=True, name=f"{prefix}.norm2_gain"),
            norm2_bias=zeros(width, f"{prefix}.norm2_bias"),
        )

    def parameters(self) -> list[Tensor]:
        return [
            self.query, self.key, self.value, self.similarity,
            self.ffn_in, self.ffn_in_bias, self.ffn_out, self.ffn_out_bias,
            self.norm1_gain, self.norm1_bias, self.norm2_gain, self.norm2_bias,
        ]  # fmt: skip


def _column_mask(valid):
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool)
    return valid[..., None, :]


def cosine_matrix(s: Tensor) -> Tensor:
    unit = s / ad.row_l2_norm(s, COSINE_FLOOR)
    return ad.matmul(unit, ad.transpose(unit))


def diversity_attention(h: Tensor, layer: EncoderLayerParams, beta: float, valid=None, return_weights=False):
    """``(beta * U1 + (1 - beta) * U2) @ V`` for input rows ``h`` of shape ``(..., n, d)``.

    ``valid`` marks real (non-pad) rows; pad columns receive no attention mass.
    """
    h = ad.as_tensor(h)
    n, width = h.shape[-2], h.shape[-1]
    mask = _column_mask(valid)
    q = ad.matmul(h, layer.query)
    k = ad.matmul(h, layer.key)
    v = ad.matmul(h, layer.value)
    s = ad.matmul(h, layer.similarity)
    u1 = ad.softmax((1.0 - cosine_matrix(s)) + np.eye(n), mask)
    u2 = ad.softmax(ad.matmul(q, ad.transpose(k)) / math.sqrt(width), mask)
    mixed = beta * u1 + (1.0 - beta) * u2
    out = ad.matmul(mixed, v)
    if return_weights:
        return out, u1, u2
    return out


def encoder_layer(x: Tensor, layer: EncoderLayerParams, beta: float, valid=None) -> Tensor:
    x = ad.layer_norm(x + diversity_attention(x, layer, beta, valid), layer.norm1_gain, layer.norm1_bias)
    hidden = ad.relu(ad.matmul(x, layer.ffn_in) + layer.ffn_in_bias)
    ffn = ad.matmul(hidden, layer.ffn_out) + layer.ffn_out_bias
    return ad.layer_norm(x + ffn, layer.norm2_gain, layer.norm2_bias)


def encode(h0: Tensor, layers: list[EncoderLayerParams], beta: float, valid=None) -> Tensor:
    x = h0
    for layer in layers:
        x = encoder_layer(x, layer, beta, valid)
    return x


def target_representation(hl: Tensor) -> Tensor:
    """Row 0 of the final layer (batched over leading axes)."""
    return hl[..., 0, :]
