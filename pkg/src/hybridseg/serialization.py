"""Space-filling-curve serialization and equal-size group partition/restore.

Sparse voxels are ordered along a Z-order (Morton) or Hilbert curve, then the
ordered feature rows are chunked into fixed-size groups with a zero-padded,
masked final group. ``restore(partition(F))`` is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConsistencyError, CoordRangeError, ShapeError

from . import tensor as T

CURVES = ("z_order", "hilbert")


# --------------------------------------------------------------------------
# Key encoding
# --------------------------------------------------------------------------


@njit(cache=True)
def _zorder_one(x: np.uint64, y: np.uint64, z: np.uint64, bits: np.int64) -> np.uint64:
    # interleave bit level by level, x in the most significant slot
    key = np.uint64(0)
    for level in range(bits - 1, -1, -1):
        key = (key << np.uint64(1)) | ((x >> np.uint64(level)) & np.uint64(1))
        key = (key << np.uint64(1)) | ((y >> np.uint64(level)) & np.uint64(1))
        key = (key << np.uint64(1)) | ((z >> np.uint64(level)) & np.uint64(1))
    return key


@njit(cache=True)
def _hilbert_one(x: np.uint64, y: np.uint64, z: np.uint64, bits: np.int64) -> np.uint64:
    # Skilling's transform: rotate the coordinate frame level by level so the
    # transposed Gray code of the result enumerates the Hilbert curve.
    ax = np.empty(3, dtype=np.uint64)
    ax[0], ax[1], ax[2] = x, y, z
    m = np.uint64(1) << np.uint64(bits - 1)
    q = m
    while q > np.uint64(1):
        p = q - np.uint64(1)
        for i in range(3):
            if ax[i] & q:
                ax[0] ^= p  # invert low bits of the first axis
            else:
                t = (ax[0] ^ ax[i]) & p
                ax[0] ^= t
                ax[i] ^= t
        q >>= np.uint64(1)
    # Gray encode
    ax[1] ^= ax[0]
    ax[2] ^= ax[1]
    t = np.uint64(0)
    q = m
    while q > np.uint64(1):
        if ax[2] & q:
            t ^= q - np.uint64(1)
        q >>= np.uint64(1)
    for i in range(3):
        ax[i] ^= t
    # interleave the transposed form, axis 0 most significant
    key = np.uint64(0)
    for level in range(bits - 1, -1, -1):
        for i in range(3):
            key = (key << np.uint64(1)) | ((ax[i] >> np.uint64(level)) & np.uint64(1))
    return key


@njit(cache=True)
def _encode_batch(coords: np.ndarray, bits: np.int64, hilbert: np.bool_) -> np.ndarray:
    n = coords.shape[0]
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        x = np.uint64(coords[i, 0])
        y = np.uint64(coords[i, 1])
        z = np.uint64(coords[i, 2])
        if hilbert:
            out[i] = _hilbert_one(x, y, z, bits)
        else:
            out[i] = _zorder_one(x, y, z, bits)
    return out


def _check_coord_range(coords: np.ndarray, bits_per_axis: int) -> None:
    if not 1 <= bits_per_axis or 3 * bits_per_axis > 63:
        raise CoordRangeError(f"bits_per_axis {bits_per_axis} outside [1, 21]")
    limit = 1 << bits_per_axis
    lo, hi = int(coords.min()), int(coords.max())
    if lo < 0 or hi >= limit:
        raise CoordRangeError(
            f"coordinate range [{lo}, {hi}] does not fit {bits_per_axis} bits per axis"
        )


def zorder_key(coord, bits_per_axis: int) -> int:
    """Morton code of one (x, y, z); x takes the most significant bit slot."""
    c = np.asarray(coord, dtype=np.int64).reshape(1, 3)
    _check_coord_range(c, bits_per_axis)
    return int(_encode_batch(c, bits_per_axis, np.bool_(False))[0])


def hilbert_key(coord, bits_per_axis: int) -> int:
    """3D Hilbert index of one (x, y, z); bijective on the full cube."""
    c = np.asarray(coord, dtype=np.int64).reshape(1, 3)
    _check_coord_range(c, bits_per_axis)
    return int(_encode_batch(c, bits_per_axis, np.bool_(True))[0])


def curve_keys(coords: np.ndarray, curve: str, bits_per_axis: int) -> np.ndarray:
    """Encode all rows of (V, 3) integer coords into u64 curve keys."""
    if curve not in CURVES:
        raise ValueError(f"unknown curve {curve!r}, expected one of {CURVES}")
    coords = np.asarray(coords, dtype=np.int64)
    _check_coord_range(coords, bits_per_axis)
    return _encode_batch(coords, bits_per_axis, np.bool_(curve == "hilbert"))


def bits_needed(coords: np.ndarray) -> int:
    """Smallest bits-per-axis that covers every coordinate."""
    hi = int(np.asarray(coords).max(initial=0))
    return max(1, int(hi).bit_length())


# --------------------------------------------------------------------------
# Serialized ordering
# --------------------------------------------------------------------------


@dataclass
class SerializedOrder:
    """A curve ordering of N items: keys plus the sorting permutation."""

    curve: str
    keys: np.ndarray  # (N,) uint64
    perm: np.ndarray  # (N,) int64; keys[perm] non-decreasing
    inv_perm: np.ndarray  # (N,) int64; perm[inv_perm] == arange

    @property
    def count(self) -> int:
        return len(self.keys)


def serialize(voxels, curve: str = "hilbert") -> SerializedOrder:
    """Order a SparseVoxelSet along a space-filling curve.

    Keys are unique because voxel coords are unique and both curves are
    bijections; the stable sort still breaks hypothetical ties by index.
    """
    coords = voxels.coords if hasattr(voxels, "coords") else np.asarray(voxels)
    bits = bits_needed(coords)
    keys = curve_keys(coords, curve, bits)
    assert len(np.unique(keys)) == len(keys), "curve keys must be unique on unique coords"
    perm = np.argsort(keys, kind="stable").astype(np.int64)
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(len(perm), dtype=np.int64)
    return SerializedOrder(curve=curve, keys=keys, perm=perm, inv_perm=inv_perm)


# --------------------------------------------------------------------------
# Partition / restore
# --------------------------------------------------------------------------


@dataclass
class GroupedFeatures:
    """Serialized features chunked into equal groups with a validity mask."""

    groups: T.Tensor  # (G, S, C)
    valid_mask: np.ndarray  # (G, S) bool; padded slots are False and zero
    group_size: int
    original_count: int


def partition(features: T.Tensor, order: SerializedOrder, group_size: int) -> GroupedFeatures:
    """Reorder rows along the curve and chunk into ceil(N/S) groups of S."""
    if group_size < 1:
        raise ShapeError(f"group_size must be >= 1, got {group_size}")
    n, c = features.shape
    if n != order.count:
        raise ConsistencyError(f"features have {n} rows but order covers {order.count}")
    g = -(-n // group_size)
    total = g * group_size
    ordered = T.gather_rows(features, order.perm)
    padded = T.pad_rows(ordered, total)
    groups = T.reshape(padded, (g, group_size, c))
    mask = np.zeros((g, group_size), dtype=bool)
    mask.reshape(-1)[:n] = True
    return GroupedFeatures(groups=groups, valid_mask=mask, group_size=group_size, original_count=n)


def restore(grouped: GroupedFeatures, order: SerializedOrder) -> T.Tensor:
    """Drop padding and undo the curve ordering; exact inverse of partition."""
    n = grouped.original_count
    if n != order.count:
        raise ConsistencyError(f"grouped data covers {n} rows but order covers {order.count}")
    g, s, c = grouped.groups.shape
    flat = T.reshape(grouped.groups, (g * s, c))
    valid = T.slice_rows(flat, n)
    return T.gather_rows(valid, order.inv_perm)
