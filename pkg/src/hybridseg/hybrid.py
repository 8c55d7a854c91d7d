"""Hybrid layer: positional conv, attention and scan sub-layers, FFN.

A hybrid layer runs xCPE (a submanifold 3x3x3 convolution with skip), then
grouped attention over small groups, then the bidirectional scan over large
groups, then a feed-forward block; each sub-layer carries its own pre-norm
residual. Alternative composition strategies either swap the two operator
sub-layers inside every layer or devote whole layers to a single operator
for each half of a stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, attention_sublayer, init_attention_params
from .errors import ConfigError, InputError
from .mamba import SsmParams, init_ssm_params, mamba_sublayer
from .serialization import CURVES, SerializedOrder

from . import tensor as T

STRATEGIES = (
    "inner_attn_first",
    "inner_mamba_first",
    "outer_attn_first",
    "outer_mamba_first",
)

# enumeration order of the 3x3x3 neighborhood; index 13 is the center
OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


@dataclass
class HybridLayerConfig:
    """Shape and composition knobs shared by every layer of a stage."""

    channels: int
    attn_group_size: int = 1024
    mamba_group_size: int = 4096
    num_heads: int = 8
    ffn_expansion: int = 4
    strategy: str = "inner_attn_first"
    curve: str = "hilbert"
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    enable_attention: bool = True
    enable_mamba: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy {self.strategy!r} not in {STRATEGIES}")
        if self.curve not in CURVES:
            raise ConfigError(f"curve {self.curve!r} not in {CURVES}")
        if self.attn_group_size < 1 or self.mamba_group_size < 1:
            raise ConfigError("group sizes must be >= 1")
        if self.channels % self.num_heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by {self.num_heads} heads"
            )
        if not (self.enable_attention or self.enable_mamba):
            raise ConfigError("at least one operator sub-layer must stay enabled")


# --------------------------------------------------------------------------
# Neighbor lookup for the submanifold convolution
# --------------------------------------------------------------------------


@dataclass
class NeighborTable:
    """Per-offset (target, source) index pairs over a fixed coord set."""

    pairs: list[tuple[np.ndarray, np.ndarray]]  # aligned with OFFSETS
    count: int


def build_neighbor_table(coords: np.ndarray) -> NeighborTable:
    """Resolve the 27-neighborhood of every voxel with packed-key lookups."""
    coords = np.asarray(coords, dtype=np.int64)
    v = coords.shape[0]
    if len(np.unique(coords, axis=0)) != v:
        raise InputError("duplicate voxel coords in neighbor table")
    shifted = coords + 1  # room for -1 offsets while staying positive
    if shifted.max(initial=1) >= (1 << 21):
        raise InputError("coords too large for packed neighbor keys")

    def pack(c):
        return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]

    keys = pack(shifted)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    pairs = []
    for off in OFFSETS:
        nkeys = pack(shifted + np.asarray(off, dtype=np.int64))
        pos = np.searchsorted(sorted_keys, nkeys)
        pos_c = np.minimum(pos, v - 1)
        found = sorted_keys[pos_c] == nkeys
        out_idx = np.flatnonzero(found)
        in_idx = order[pos_c[found]]
        pairs.append((out_idx.astype(np.int64), in_idx.astype(np.int64)))
    return NeighborTable(pairs=pairs, count=v)


# --------------------------------------------------------------------------
# xCPE
# --------------------------------------------------------------------------


@dataclass
class XcpeParams:
    weights: T.Tensor  # (27, C, C)


def init_xcpe_params(rng: np.random.Generator, channels: int) -> XcpeParams:
    std = 1.0 / math.sqrt(27 * channels)
    return XcpeParams(
        weights=T.Tensor(rng.normal(0.0, std, size=(27, channels, channels)), requires_grad=True)
    )


def _submanifold_conv(features: T.Tensor, weights: T.Tensor, table: NeighborTable) -> T.Tensor:
    fd, wd = features.data, weights.data
    out = np.zeros_like(fd)
    for o, (out_idx, in_idx) in enumerate(table.pairs):
        if len(out_idx):
            out[out_idx] += fd[in_idx] @ wd[o]

    def backward(g):
        df = np.zeros_like(fd)
        dw = np.zeros_like(wd)
        for o, (out_idx, in_idx) in enumerate(table.pairs):
            if len(out_idx):
                df[in_idx] += g[out_idx] @ wd[o].T
                dw[o] += fd[in_idx].T @ g[out_idx]
        return (df, dw)

    return T.from_op(out, (features, weights), backward)


def xcpe(features: T.Tensor, neighbors, params: XcpeParams) -> T.Tensor:
    """Conditional positional encoding: F + SubmConv3(F) over existing voxels.

    ``neighbors`` is a (V, 3) coords array or a prebuilt NeighborTable.
    """
    table = neighbors if isinstance(neighbors, NeighborTable) else build_neighbor_table(neighbors)
    if table.count != features.shape[0]:
        raise ConfigError(
            f"neighbor table covers {table.count} voxels, features have {features.shape[0]}"
        )
    return T.add(features, _submanifold_conv(features, params.weights, table))


# --------------------------------------------------------------------------
# FFN
# --------------------------------------------------------------------------


@dataclass
class FfnParams:
    w1: T.Tensor  # (C, hidden)
    w2: T.Tensor  # (hidden, C)
    norm_gamma: T.Tensor
    norm_beta: T.Tensor


def init_ffn_params(rng: np.random.Generator, channels: int, expansion: int) -> FfnParams:
    hidden = expansion * channels
    return FfnParams(
        w1=T.Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, hidden)), requires_grad=True),
        w2=T.Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, channels)), requires_grad=True),
        norm_gamma=T.Tensor(np.ones(channels), requires_grad=True),
        norm_beta=T.Tensor(np.zeros(channels), requires_grad=True),
    )


def ffn(features: T.Tensor, params: FfnParams) -> T.Tensor:
    """Pre-norm feed-forward residual: F + W2.GELU(W1.LN(F))."""
    normed = T.layer_norm(features, params.norm_gamma, params.norm_beta)
    hidden = T.gelu(T.matmul(normed, params.w1))
    return T.add(features, T.matmul(hidden, params.w2))


# --------------------------------------------------------------------------
# Layer assembly
# --------------------------------------------------------------------------

LAYER_KINDS = ("hybrid_attn_first", "hybrid_mamba_first", "attn_only", "mamba_only")


@dataclass
class HybridLayerParams:
    kind: str
    xcpe: XcpeParams
    ffn: FfnParams
    attn: AttentionParams | None = None
    ssm: SsmParams | None = None


def init_layer_params(rng: np.random.Generator, kind: str, cfg: HybridLayerConfig) -> HybridLayerParams:
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    wants_attn = kind in ("hybrid_attn_first", "hybrid_mamba_first", "attn_only")
    wants_ssm = kind in ("hybrid_attn_first", "hybrid_mamba_first", "mamba_only")
    if kind.startswith("hybrid"):
        wants_attn = wants_attn and cfg.enable_attention
        wants_ssm = wants_ssm and cfg.enable_mamba
    return HybridLayerParams(
        kind=kind,
        xcpe=init_xcpe_params(rng, cfg.channels),
        ffn=init_ffn_params(rng, cfg.channels, cfg.ffn_expansion),
        attn=init_attention_params(rng, cfg.channels, cfg.num_heads) if wants_attn else None,
        ssm=init_ssm_params(rng, cfg.channels, cfg.state_dim, cfg.expand, cfg.conv_width)
        if wants_ssm
        else None,
    )


def hybrid_layer_forward(
    features: T.Tensor,
    neighbors,
    order: SerializedOrder,
    cfg: HybridLayerConfig,
    params: HybridLayerParams,
) -> T.Tensor:
    """One layer: xCPE, then the operator sub-layers in kind order, then FFN."""
    h = xcpe(features, neighbors, params.xcpe)
    if params.kind == "hybrid_mamba_first":
        sublayers = ("mamba", "attn")
    elif params.kind == "attn_only":
        sublayers = ("attn",)
    elif params.kind == "mamba_only":
        sublayers = ("mamba",)
    else:
        sublayers = ("attn", "mamba")
    for name in sublayers:
        if name == "attn" and params.attn is not None:
            h = attention_sublayer(h, order, cfg.attn_group_size, params.attn)
        elif name == "mamba" and params.ssm is not None:
            h = mamba_sublayer(h, order, cfg.mamba_group_size, params.ssm)
    return ffn(h, params.ffn)


def build_stage(depth: int, cfg: HybridLayerConfig) -> list[str]:
    """Layer kinds for a stage of ``depth`` layers under the chosen strategy.

    Inner strategies use hybrid layers throughout; outer strategies give the
    first ceil(depth/2) layers to one operator and the rest to the other.
    """
    if depth < 1:
        raise ConfigError(f"stage depth must be >= 1, got {depth}")
    if cfg.strategy == "inner_attn_first":
        return ["hybrid_attn_first"] * depth
    if cfg.strategy == "inner_mamba_first":
        return ["hybrid_mamba_first"] * depth
    first = -(-depth // 2)
    if cfg.strategy == "outer_mamba_first":
        return ["mamba_only"] * first + ["attn_only"] * (depth - first)
    return ["attn_only"] * first + ["mamba_only"] * (depth - first)


def init_stage_params(
    rng: np.random.Generator, depth: int, cfg: HybridLayerConfig
) -> list[HybridLayerParams]:
    return [init_layer_params(rng, kind, cfg) for kind in build_stage(depth, cfg)]
