"""UNet assembly: encoder/decoder stages over a sparse voxel hierarchy.

The forward pass voxelizes a cloud, embeds voxel features, runs hybrid
stages at five resolutions with grid pooling between them, mirrors back up
through four decoder stages with skip fusion, and classifies per voxel
before copying logits back to points. Geometry (voxel pyramids, neighbor
tables, curve orderings) is separated into a reusable plan so repeated
passes over the same scene skip that work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MappingError
from .hybrid import (
    HybridLayerConfig,
    HybridLayerParams,
    NeighborTable,
    build_neighbor_table,
    hybrid_layer_forward,
    init_stage_params,
)
from .pointcloud import PointCloud, SparseVoxelSet, majority_labels, project_to_points, voxelize
from .serialization import SerializedOrder, serialize

from . import tensor as T


@dataclass
class NetworkConfig:
    """Full architecture description; see configs/ for the shipped presets."""

    num_classes: int
    in_features: int = 3
    cell_size: float = 0.05
    curve: str = "hilbert"
    encoder_depths: tuple[int, ...] = (2, 2, 2, 6, 2)
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    attn_group_size: int = 1024
    mamba_group_size: int = 4096
    num_heads: int = 8
    ffn_expansion: int = 4
    strategy: str = "inner_attn_first"
    pool_stride: int = 2
    skip_mode: str = "add"
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    enable_attention: bool = True
    enable_mamba: bool = True

    def __post_init__(self):
        self.encoder_depths = tuple(self.encoder_depths)
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_depths = tuple(self.decoder_depths)
        self.decoder_channels = tuple(self.decoder_channels)
        n = len(self.encoder_depths)
        if len(self.encoder_channels) != n:
            raise ConfigError("encoder_depths and encoder_channels must have equal length")
        if len(self.decoder_depths) != n - 1 or len(self.decoder_channels) != n - 1:
            raise ConfigError("decoder stages must number one less than encoder stages")
        if self.pool_stride < 2:
            raise ConfigError(f"pool_stride must be >= 2, got {self.pool_stride}")
        if self.skip_mode not in ("add", "concat"):
            raise ConfigError(f"skip_mode must be add or concat, got {self.skip_mode!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.cell_size <= 0:
            raise ConfigError("cell_size must be positive")
        for c in (*self.encoder_channels, *self.decoder_channels):
            if c % self.num_heads != 0:
                raise ConfigError(f"channel width {c} not divisible by {self.num_heads} heads")
        if self.skip_mode == "add":
            for i, c in enumerate(self.decoder_channels):
                level = n - 2 - i
                if c != self.encoder_channels[level]:
                    raise ConfigError(
                        "skip_mode=add needs decoder channels to mirror encoder widths; "
                        f"decoder stage {i} has {c}, encoder level {level} has "
                        f"{self.encoder_channels[level]}"
                    )
        # group sizes are shared by every stage; validate via one layer config
        self.layer_config(self.encoder_channels[0])

    @property
    def num_levels(self) -> int:
        return len(self.encoder_depths)

    def layer_config(self, channels: int) -> HybridLayerConfig:
        return HybridLayerConfig(
            channels=channels,
            attn_group_size=self.attn_group_size,
            mamba_group_size=self.mamba_group_size,
            num_heads=self.num_heads,
            ffn_expansion=self.ffn_expansion,
            strategy=self.strategy,
            curve=self.curve,
            state_dim=self.state_dim,
            expand=self.expand,
            conv_width=self.conv_width,
            enable_attention=self.enable_attention,
            enable_mamba=self.enable_mamba,
        )


# --------------------------------------------------------------------------
# Grid pooling
# --------------------------------------------------------------------------


def pool_geometry(voxels: SparseVoxelSet, stride: int) -> tuple[SparseVoxelSet, np.ndarray]:
    """Coarsen coords by integer division; returns the child->parent map."""
    coarse = voxels.coords // stride
    span = coarse.max(axis=0) + 1
    key = (coarse[:, 0] * span[1] + coarse[:, 1]) * span[2] + coarse[:, 2]
    uniq, parent_map = np.unique(key, return_inverse=True)
    vc = len(uniq)
    coords = np.empty((vc, 3), dtype=np.int64)
    coords[:, 2] = uniq % span[2]
    rest = uniq // span[2]
    coords[:, 1] = rest % span[1]
    coords[:, 0] = rest // span[1]
    counts = np.bincount(parent_map, minlength=vc).astype(np.float64)
    pooled_raw = np.zeros((vc, voxels.features.shape[1]))
    np.add.at(pooled_raw, parent_map, voxels.features)
    pooled_raw /= counts[:, None]
    coarse_set = SparseVoxelSet(
        coords=coords,
        features=pooled_raw,
        point_to_voxel=parent_map[voxels.point_to_voxel],
        labels=majority_labels(parent_map, voxels.labels, vc),
        origin_index=np.zeros(3, dtype=np.int64),  # coarse levels use a local frame
        cell_size=voxels.cell_size * stride,
    )
    return coarse_set, parent_map.astype(np.int64)


@dataclass
class PoolParams:
    weight: T.Tensor  # (C_fine, C_coarse)
    bias: T.Tensor


@dataclass
class UnpoolParams:
    weight: T.Tensor  # (C_coarse, C_fine)
    bias: T.Tensor
    fuse_weight: T.Tensor | None = None  # concat mode: (2*C_fine_ish, C_fine)
    fuse_bias: T.Tensor | None = None


def grid_pool(
    voxels: SparseVoxelSet,
    features: T.Tensor,
    stride: int,
    params: PoolParams,
) -> tuple[SparseVoxelSet, T.Tensor, np.ndarray]:
    """Mean-pool children into parents, then project to the next width."""
    if stride < 2:
        raise ConfigError(f"pool stride must be >= 2, got {stride}")
    coarse_set, parent_map = pool_geometry(voxels, stride)
    pooled = T.segment_mean(features, parent_map, coarse_set.num_voxels)
    projected = T.linear(pooled, params.weight, params.bias)
    return coarse_set, projected, parent_map


def grid_unpool(
    f_coarse: T.Tensor,
    parent_map: np.ndarray,
    f_skip: T.Tensor,
    params: UnpoolParams,
) -> T.Tensor:
    """Broadcast each parent's projected feature to its children, fuse skip."""
    parent_map = np.asarray(parent_map, dtype=np.int64)
    vc = f_coarse.shape[0]
    if parent_map.size and (parent_map.min() < 0 or parent_map.max() >= vc):
        raise MappingError(
            f"parent_map references parent {int(parent_map.max())} outside [0, {vc})"
        )
    if len(parent_map) != f_skip.shape[0]:
        raise MappingError(
            f"parent_map covers {len(parent_map)} children, skip has {f_skip.shape[0]} rows"
        )
    projected = T.linear(f_coarse, params.weight, params.bias)
    gathered = T.gather_rows(projected, parent_map)
    if params.fuse_weight is None:
        return T.add(gathered, f_skip)
    fused = T.concat_cols(gathered, f_skip)
    return T.linear(fused, params.fuse_weight, params.fuse_bias)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass
class HeadParams:
    norm_gamma: T.Tensor
    norm_beta: T.Tensor
    weight: T.Tensor
    bias: T.Tensor


@dataclass
class NetworkParams:
    embed_weight: T.Tensor
    embed_bias: T.Tensor
    encoder_stages: list[list[HybridLayerParams]]
    pools: list[PoolParams]
    decoder_stages: list[list[HybridLayerParams]]
    unpools: list[UnpoolParams]
    head: HeadParams


def _linear_init(rng, cin, cout):
    w = T.Tensor(rng.normal(0.0, 1.0 / math.sqrt(cin), size=(cin, cout)), requires_grad=True)
    b = T.Tensor(np.zeros(cout), requires_grad=True)
    return w, b


def init_network_params(rng: np.random.Generator, cfg: NetworkConfig) -> NetworkParams:
    n = cfg.num_levels
    embed_w, embed_b = _linear_init(rng, cfg.in_features, cfg.encoder_channels[0])
    encoder_stages = [
        init_stage_params(rng, cfg.encoder_depths[s], cfg.layer_config(cfg.encoder_channels[s]))
        for s in range(n)
    ]
    pools = []
    for s in range(n - 1):
        w, b = _linear_init(rng, cfg.encoder_channels[s], cfg.encoder_channels[s + 1])
        pools.append(PoolParams(weight=w, bias=b))
    decoder_stages = []
    unpools = []
    for i in range(n - 1):
        level = n - 2 - i
        c_coarse = cfg.encoder_channels[n - 1] if i == 0 else cfg.decoder_channels[i - 1]
        c_fine = cfg.decoder_channels[i]
        w, b = _linear_init(rng, c_coarse, c_fine)
        if cfg.skip_mode == "concat":
            fw, fb = _linear_init(rng, c_fine + cfg.encoder_channels[level], c_fine)
            unpools.append(UnpoolParams(weight=w, bias=b, fuse_weight=fw, fuse_bias=fb))
        else:
            unpools.append(UnpoolParams(weight=w, bias=b))
        decoder_stages.append(
            init_stage_params(rng, cfg.decoder_depths[i], cfg.layer_config(c_fine))
        )
    head_w, head_b = _linear_init(rng, cfg.decoder_channels[-1], cfg.num_classes)
    head = HeadParams(
        norm_gamma=T.Tensor(np.ones(cfg.decoder_channels[-1]), requires_grad=True),
        norm_beta=T.Tensor(np.zeros(cfg.decoder_channels[-1]), requires_grad=True),
        weight=head_w,
        bias=head_b,
    )
    return NetworkParams(
        embed_weight=embed_w,
        embed_bias=embed_b,
        encoder_stages=encoder_stages,
        pools=pools,
        decoder_stages=decoder_stages,
        unpools=unpools,
        head=head,
    )


def named_parameters(obj, prefix: str = "") -> list[tuple[str, T.Tensor]]:
    """Flatten a parameter tree into deterministic (name, tensor) pairs."""
    out: list[tuple[str, T.Tensor]] = []
    if isinstance(obj, T.Tensor):
        out.append((prefix, obj))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            child = getattr(obj, name)
            out.extend(named_parameters(child, f"{prefix}.{name}" if prefix else name))
    return out


def zero_output_projections(params: NetworkParams) -> None:
    """Zero every layer's output projections so each layer becomes identity."""
    for stage in (*params.encoder_stages, *params.decoder_stages):
        for layer in stage:
            layer.xcpe.weights.data[:] = 0.0
            layer.ffn.w2.data[:] = 0.0
            if layer.attn is not None:
                layer.attn.wo.data[:] = 0.0
            if layer.ssm is not None:
                layer.ssm.w_out.data[:] = 0.0


# --------------------------------------------------------------------------
# Forward plan
# --------------------------------------------------------------------------


@dataclass
class LevelPlan:
    voxels: SparseVoxelSet
    neighbors: NeighborTable
    encoder_order: SerializedOrder
    decoder_order: SerializedOrder | None
    parent_map: np.ndarray | None


@dataclass
class ForwardPlan:
    levels: list[LevelPlan]
    num_points: int


def build_plan(pc: PointCloud, cfg: NetworkConfig) -> ForwardPlan:
    """Voxelize and precompute geometry for every resolution level.

    Serialization runs once per encoder stage and once per decoder stage,
    nine times for the five-level configuration.
    """
    n = cfg.num_levels
    levels: list[LevelPlan] = []
    voxels = voxelize(pc, cfg.cell_size)
    sets: list[SparseVoxelSet] = []
    maps: list[np.ndarray | None] = []
    for s in range(n):
        sets.append(voxels)
        if s < n - 1:
            voxels, parent_map = pool_geometry(voxels, cfg.pool_stride)
            maps.append(parent_map)
        else:
            maps.append(None)
    encoder_orders = [serialize(vs, cfg.curve) for vs in sets]
    decoder_orders: list[SerializedOrder | None] = [None] * n
    for level in range(n - 2, -1, -1):  # decoder revisits levels n-2 .. 0
        decoder_orders[level] = serialize(sets[level], cfg.curve)
    for s in range(n):
        levels.append(
            LevelPlan(
                voxels=sets[s],
                neighbors=build_neighbor_table(sets[s].coords),
                encoder_order=encoder_orders[s],
                decoder_order=decoder_orders[s],
                parent_map=maps[s],
            )
        )
    return ForwardPlan(levels=levels, num_points=pc.num_points)


def _run_stage(features, level, order, cfg, channels, stage_params, trace, tag):
    layer_cfg = cfg.layer_config(channels)
    for li, layer in enumerate(stage_params):
        before = features
        features = hybrid_layer_forward(features, level.neighbors, order, layer_cfg, layer)
        if trace is not None:
            trace.append((f"{tag}.layer{li}", before.data.copy(), features.data.copy()))
    return features


def forward_on_plan(
    plan: ForwardPlan,
    cfg: NetworkConfig,
    params: NetworkParams,
    point_features: T.Tensor | None = None,
    trace: list | None = None,
) -> T.Tensor:
    """Run the network over precomputed geometry; returns (P, K) point logits."""
    n = cfg.num_levels
    base = plan.levels[0].voxels
    if point_features is None:
        voxel_feats = T.Tensor(base.features)
    else:
        # differentiable mean pooling from points into base voxels
        voxel_feats = T.segment_mean(point_features, base.point_to_voxel, base.num_voxels)
    f = T.linear(voxel_feats, params.embed_weight, params.embed_bias)
    skips: list[T.Tensor] = []
    for s in range(n):
        level = plan.levels[s]
        f = _run_stage(
            f, level, level.encoder_order, cfg, cfg.encoder_channels[s],
            params.encoder_stages[s], trace, f"enc{s}",
        )
        if s < n - 1:
            skips.append(f)
            pooled = T.segment_mean(f, level.parent_map, plan.levels[s + 1].voxels.num_voxels)
            f = T.linear(pooled, params.pools[s].weight, params.pools[s].bias)
    for i in range(n - 1):
        level_idx = n - 2 - i
        level = plan.levels[level_idx]
        f = grid_unpool(f, level.parent_map, skips[level_idx], params.unpools[i])
        f = _run_stage(
            f, level, level.decoder_order, cfg, cfg.decoder_channels[i],
            params.decoder_stages[i], trace, f"dec{i}",
        )
    f = T.layer_norm(f, params.head.norm_gamma, params.head.norm_beta)
    voxel_logits = T.linear(f, params.head.weight, params.head.bias)
    return project_to_points(voxel_logits, base.point_to_voxel)


def forward(pc: PointCloud, cfg: NetworkConfig, params: NetworkParams) -> T.Tensor:
    """Voxelize, run the UNet, and return per-point logits (P, num_classes)."""
    if pc.features.shape[1] != cfg.in_features:
        raise ConfigError(
            f"cloud has {pc.features.shape[1]} feature channels, config expects {cfg.in_features}"
        )
    plan = build_plan(pc, cfg)
    return forward_on_plan(plan, cfg, params, point_features=T.Tensor(pc.features))
