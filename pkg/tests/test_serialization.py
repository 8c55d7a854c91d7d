import numpy as np
import pytest

from hybridseg import tensor as T
from hybridseg.errors import ConsistencyError, CoordRangeError
from hybridseg.pointcloud import PointCloud, voxelize
from hybridseg.serialization import (
    GroupedFeatures,
    bits_needed,
    curve_keys,
    hilbert_key,
    partition,
    restore,
    serialize,
    zorder_key,
)


# ---------------------------------------------------------------- oracles


def zorder_oracle(x, y, z, bits):
    """Build the Morton code as a bit string, x first at each level."""
    s = ""
    for level in range(bits - 1, -1, -1):
        s += str((x >> level) & 1) + str((y >> level) & 1) + str((z >> level) & 1)
    return int(s, 2)


def hilbert_decode(key, bits):
    """Independent inverse of the Hilbert encoder (transpose-form unpacking)."""
    X = [0, 0, 0]
    pos = 3 * bits
    for level in range(bits - 1, -1, -1):
        for i in range(3):
            pos -= 1
            X[i] |= ((key >> pos) & 1) << level
    N = 2 << (bits - 1)
    t = X[2] >> 1
    for i in (2, 1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    Q = 2
    while Q != N:
        P = Q - 1
        for i in (2, 1, 0):
            if X[i] & Q:
                X[0] ^= P
            else:
                t = (X[0] ^ X[i]) & P
                X[0] ^= t
                X[i] ^= t
        Q <<= 1
    return tuple(X)


def all_cells(bits):
    n = 1 << bits
    return [(x, y, z) for x in range(n) for y in range(n) for z in range(n)]


# ---------------------------------------------------------------- z-order


class TestZorder:
    def test_origin(self):
        assert zorder_key((0, 0, 0), 4) == 0

    def test_all_ones_single_bit(self):
        assert zorder_key((1, 1, 1), 1) == 7

    def test_x_most_significant(self):
        assert zorder_key((1, 0, 0), 1) == 4

    def test_matches_bit_string_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            bits = int(rng.integers(1, 8))
            x, y, z = (int(v) for v in rng.integers(0, 1 << bits, size=3))
            assert zorder_key((x, y, z), bits) == zorder_oracle(x, y, z, bits)

    def test_range_errors(self):
        with pytest.raises(CoordRangeError):
            zorder_key((4, 0, 0), 2)
        with pytest.raises(CoordRangeError):
            zorder_key((0, 0, 0), 22)
        with pytest.raises(CoordRangeError):
            zorder_key((-1, 0, 0), 4)


# ---------------------------------------------------------------- hilbert


class TestHilbert:
    def test_origin(self):
        assert hilbert_key((0, 0, 0), 3) == 0

    def test_order1_is_adjacent_permutation(self):
        keys = {c: hilbert_key(c, 1) for c in all_cells(1)}
        assert sorted(keys.values()) == list(range(8))
        by_key = {k: c for c, k in keys.items()}
        for k in range(7):
            a, b = by_key[k], by_key[k + 1]
            assert sum(abs(a[i] - b[i]) for i in range(3)) == 1

    def test_order2_roundtrip_with_independent_decoder(self):
        for c in all_cells(2):
            assert hilbert_decode(hilbert_key(c, 2), 2) == c

    def test_order3_continuity(self):
        cells = all_cells(3)
        keys = np.array([hilbert_key(c, 3) for c in cells])
        order = np.argsort(keys)
        pts = np.array(cells)[order]
        steps = np.abs(np.diff(pts, axis=0)).sum(axis=1)
        assert (steps == 1).all()


# ---------------------------------------------------------------- serialize


def voxels_from_coords(coords):
    coords = np.asarray(coords, dtype=np.float64)
    pc = PointCloud(
        coords + 0.5,
        np.zeros((len(coords), 1)),
        np.zeros(len(coords), dtype=np.int64),
    )
    return voxelize(pc, 1.0)


class TestSerialize:
    def test_single_voxel(self):
        order = serialize(voxels_from_coords([[0, 0, 0]]), "hilbert")
        np.testing.assert_array_equal(order.perm, [0])
        np.testing.assert_array_equal(order.inv_perm, [0])

    def test_presorted_coords_give_identity_perm(self):
        rng = np.random.default_rng(22)
        coords = rng.integers(0, 16, size=(50, 3))
        coords = np.unique(coords, axis=0)
        keys = [zorder_oracle(*c, bits_needed(coords)) for c in coords]
        coords = coords[np.argsort(keys)]
        order = serialize(coords, "z_order")
        np.testing.assert_array_equal(order.perm, np.arange(len(coords)))

    def test_keys_sorted_by_perm(self):
        rng = np.random.default_rng(23)
        coords = np.unique(rng.integers(0, 32, size=(80, 3)), axis=0)
        for curve in ("z_order", "hilbert"):
            order = serialize(coords, curve)
            sorted_keys = order.keys[order.perm]
            assert (np.diff(sorted_keys.astype(np.int64)) > 0).all()
            np.testing.assert_array_equal(order.perm[order.inv_perm], np.arange(len(coords)))


# ---------------------------------------------------------------- groups


class TestPartitionRestore:
    def test_ceiling_split(self):
        rng = np.random.default_rng(24)
        f = T.tensor(rng.normal(size=(5, 3)))
        order = serialize(np.array([[i, 0, 0] for i in range(5)]), "z_order")
        grouped = partition(f, order, 2)
        assert grouped.groups.shape == (3, 2, 3)
        assert grouped.valid_mask.sum() == 5
        assert grouped.valid_mask[2].tolist() == [True, False]
        # padded slot holds zeros
        np.testing.assert_array_equal(grouped.groups.data[2, 1], np.zeros(3))
        out = restore(grouped, order)
        np.testing.assert_array_equal(out.data, f.data)

    def test_exact_fit_single_group(self):
        rng = np.random.default_rng(25)
        f = T.tensor(rng.normal(size=(8, 4)))
        order = serialize(np.array([[i, 0, 0] for i in range(8)]), "hilbert")
        grouped = partition(f, order, 8)
        assert grouped.groups.shape == (1, 8, 4)
        assert grouped.valid_mask.all()

    def test_masked_rows_reproduce_permuted_features(self):
        rng = np.random.default_rng(26)
        coords = np.unique(rng.integers(0, 64, size=(120, 3)), axis=0)[:100]
        f = T.tensor(rng.normal(size=(100, 6)))
        order = serialize(coords, "hilbert")
        grouped = partition(f, order, 7)
        flat = grouped.groups.data.reshape(-1, 6)[grouped.valid_mask.reshape(-1)]
        np.testing.assert_array_equal(flat, f.data[order.perm])

    def test_roundtrip_bit_identical(self):
        rng = np.random.default_rng(27)
        coords = np.unique(rng.integers(0, 50, size=(80, 3)), axis=0)[:64]
        f = T.tensor(rng.normal(size=(64, 8)))
        order = serialize(coords, "hilbert")
        out = restore(partition(f, order, 10), order)
        assert (out.data == f.data).all()

    def test_zero_features_stay_zero(self):
        order = serialize(np.array([[0, 0, 0], [1, 1, 1], [2, 0, 1]]), "z_order")
        out = restore(partition(T.tensor(np.zeros((3, 2))), order, 2), order)
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_roundtrip_many_sizes(self):
        rng = np.random.default_rng(28)
        for _ in range(12):
            n = int(rng.integers(1, 513))
            coords = rng.integers(0, 64, size=(n * 2, 3))
            coords = np.unique(coords, axis=0)[:n]
            n = len(coords)
            f = T.tensor(rng.normal(size=(n, 5)))
            for s in (1, 2, 7, 64, 1024):
                for curve in ("z_order", "hilbert"):
                    order = serialize(coords, curve)
                    out = restore(partition(f, order, s), order)
                    assert (out.data == f.data).all()

    def test_mismatched_order_rejected(self):
        order3 = serialize(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), "z_order")
        order2 = serialize(np.array([[0, 0, 0], [1, 0, 0]]), "z_order")
        grouped = partition(T.tensor(np.zeros((3, 2))), order3, 2)
        with pytest.raises(ConsistencyError):
            restore(grouped, order2)

    def test_partition_gradients_flow(self):
        rng = np.random.default_rng(29)
        coords = np.unique(rng.integers(0, 8, size=(12, 3)), axis=0)[:9]
        h = T.tensor(rng.normal(size=(9, 2)))
        order = serialize(coords, "hilbert")

        def f(x):
            return T.sum_all(T.mul(restore(partition(x, order, 4), order), h))

        report = T.grad_check(f, T.tensor(rng.normal(size=(9, 2))))
        assert report.passed


# ---------------------------------------------------------------- locality


def test_hilbert_locality_beats_random_permutation():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        pc = PointCloud(
            rng.uniform(0, 6, size=(800, 3)),
            rng.uniform(0, 1, size=(800, 1)),
            np.zeros(800, dtype=np.int64),
        )
        vs = voxelize(pc, 0.15)
        centers = vs.centers()
        order = serialize(vs, "hilbert")
        path = centers[order.perm]
        hilbert_mean = np.linalg.norm(np.diff(path, axis=0), axis=1).mean()
        rand_perm = rng.permutation(vs.num_voxels)
        rand_mean = np.linalg.norm(np.diff(centers[rand_perm], axis=0), axis=1).mean()
        if hilbert_mean <= rand_mean:
            wins += 1
    assert wins == 10
