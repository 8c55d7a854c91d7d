"""Point cloud container, voxelization, and voxel-to-point projection.

Voxelization bins points into an axis-aligned grid. Binning happens in the
global grid frame (floor(position / cell_size)) and coordinates are then
shifted by the minimum occupied cell index, so stored coords are non-negative
while translations by whole cells shift the global cell indices exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, MappingError

from . import tensor as T


@dataclass
class PointCloud:
    """Raw points with per-point features and labels (-1 marks ignore)."""

    positions: np.ndarray  # (P, 3) float64, meters
    features: np.ndarray  # (P, Cf) float64
    labels: np.ndarray  # (P,) int64

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InputError(f"positions must be (P, 3), got {self.positions.shape}")
        p = self.positions.shape[0]
        if p < 1:
            raise InputError("point cloud must contain at least one point")
        if self.features.shape[0] != p or self.labels.shape[0] != p:
            raise InputError("positions, features, and labels must agree on P")
        if not np.isfinite(self.positions).all() or not np.isfinite(self.features).all():
            raise InputError("positions and features must be finite")

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]


@dataclass
class SparseVoxelSet:
    """Occupied voxels with pooled features and the point membership map."""

    coords: np.ndarray  # (V, 3) int64, non-negative, unique rows
    features: np.ndarray  # (V, C) float64, mean of member features
    point_to_voxel: np.ndarray  # (P,) int64
    labels: np.ndarray  # (V,) int64, majority vote over members
    origin_index: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    cell_size: float = 1.0

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def centers(self) -> np.ndarray:
        """World-space centers of the voxels."""
        return (self.coords + self.origin_index + 0.5) * self.cell_size


def majority_labels(seg_ids: np.ndarray, labels: np.ndarray, num_segments: int) -> np.ndarray:
    """Per-segment majority label; ties resolve to the smallest label id."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    # count occurrences of each (segment, label) pair
    order = np.lexsort((labels, seg_ids))
    s, l = seg_ids[order], labels[order]
    boundary = np.ones(len(s), dtype=bool)
    boundary[1:] = (s[1:] != s[:-1]) | (l[1:] != l[:-1])
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, len(s)))
    seg_u, lab_u = s[starts], l[starts]
    # winner per segment: max count, then smallest label
    pick = np.lexsort((lab_u, -counts, seg_u))
    first = np.ones(len(pick), dtype=bool)
    segs_sorted = seg_u[pick]
    first[1:] = segs_sorted[1:] != segs_sorted[:-1]
    out = np.empty(num_segments, dtype=np.int64)
    out[segs_sorted[first]] = lab_u[pick[first]]
    return out


def voxelize(pc: PointCloud, cell_size: float) -> SparseVoxelSet:
    """Bin a point cloud into voxels of edge ``cell_size`` meters.

    Points sharing a cell are merged: features by arithmetic mean, labels by
    majority vote with ties going to the smallest label id.
    """
    if cell_size <= 0:
        raise InputError(f"cell_size must be positive, got {cell_size}")
    cells = np.floor(pc.positions / cell_size).astype(np.int64)
    origin_index = cells.min(axis=0)
    local = cells - origin_index  # >= 0 by construction
    span = local.max(axis=0) + 1
    key = (local[:, 0] * span[1] + local[:, 1]) * span[2] + local[:, 2]
    uniq, inverse = np.unique(key, return_inverse=True)
    v = len(uniq)
    counts = np.bincount(inverse, minlength=v).astype(np.float64)
    feats = np.zeros((v, pc.features.shape[1]))
    np.add.at(feats, inverse, pc.features)
    feats /= counts[:, None]
    coords = np.empty((v, 3), dtype=np.int64)
    coords[:, 2] = uniq % span[2]
    rest = uniq // span[2]
    coords[:, 1] = rest % span[1]
    coords[:, 0] = rest // span[1]
    return SparseVoxelSet(
        coords=coords,
        features=feats,
        point_to_voxel=inverse.astype(np.int64),
        labels=majority_labels(inverse, pc.labels, v),
        origin_index=origin_index,
        cell_size=float(cell_size),
    )


def project_to_points(voxel_logits: T.Tensor, point_to_voxel: np.ndarray) -> T.Tensor:
    """Copy each voxel's logit row to all of its member points."""
    mapping = np.asarray(point_to_voxel, dtype=np.int64)
    v = voxel_logits.shape[0]
    if mapping.size and (mapping.min() < 0 or mapping.max() >= v):
        raise MappingError(
            f"point_to_voxel references voxel {int(mapping.max())} outside [0, {v})"
        )
    return T.gather_rows(voxel_logits, mapping)
