"""Grouped multi-head self-attention over curve-serialized voxel features.

Attention runs independently inside each serialized group of size L, which
keeps the quadratic cost confined to L and extracts fine-grained local
structure. Padded slots are excluded through a large negative logit bias on
keys, and padded query rows are zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .serialization import GroupedFeatures, SerializedOrder, partition, restore

from . import tensor as T

_MASK_BIAS = -1e30  # exp underflows to exactly 0 after max-subtraction


@dataclass
class AttentionParams:
    """Projection weights for one attention sub-layer (bias-free)."""

    wq: T.Tensor  # (C, C)
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    num_heads: int
    norm_gamma: T.Tensor  # pre-norm scale/shift, (C,)
    norm_beta: T.Tensor

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.num_heads != 0:
            raise ConfigError(f"channels {c} not divisible by {self.num_heads} heads")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


def init_attention_params(rng: np.random.Generator, channels: int, num_heads: int) -> AttentionParams:
    std = 1.0 / math.sqrt(channels)
    def w():
        return T.Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True)

    return AttentionParams(
        wq=w(),
        wk=w(),
        wv=w(),
        wo=w(),
        num_heads=num_heads,
        norm_gamma=T.Tensor(np.ones(channels), requires_grad=True),
        norm_beta=T.Tensor(np.zeros(channels), requires_grad=True),
    )


def grouped_msa(
    grouped: GroupedFeatures,
    params: AttentionParams,
    return_weights: bool = False,
):
    """Scaled dot-product attention within each group.

    Padded key positions get a -1e30 logit bias; padded query rows come out
    zero. Returns grouped features with the same mask (and optionally the
    (G, H, S, S) attention weights for inspection).
    """
    g, s, c = grouped.groups.shape
    h = params.num_heads
    if c != params.channels:
        raise ConfigError(f"features have {c} channels, params expect {params.channels}")
    d = params.head_dim

    def heads(x):
        # (G, S, C) -> (G, H, S, d)
        return T.transpose(T.reshape(x, (g, s, h, d)), (0, 2, 1, 3))

    q = heads(T.matmul(grouped.groups, params.wq))
    k = heads(T.matmul(grouped.groups, params.wk))
    v = heads(T.matmul(grouped.groups, params.wv))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    key_bias = np.where(grouped.valid_mask, 0.0, _MASK_BIAS)[:, None, None, :]
    attn = T.softmax(T.add_const(scores, key_bias), axis=-1)

    mixed = T.matmul(attn, v)  # (G, H, S, d)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (g, s, c))
    out = T.matmul(merged, params.wo)
    out = T.mask_mul(out, grouped.valid_mask[:, :, None].astype(np.float64))

    result = GroupedFeatures(
        groups=out,
        valid_mask=grouped.valid_mask,
        group_size=grouped.group_size,
        original_count=grouped.original_count,
    )
    if return_weights:
        return result, attn.data
    return result


def attention_sublayer(
    features: T.Tensor,
    order: SerializedOrder,
    group_size: int,
    params: AttentionParams,
) -> T.Tensor:
    """Pre-norm residual attention: F + Restore(MSA(Partition(LN(F), L)), L)."""
    normed = T.layer_norm(features, params.norm_gamma, params.norm_beta)
    grouped = partition(normed, order, group_size)
    attended = grouped_msa(grouped, params)
    return T.add(features, restore(attended, order))
