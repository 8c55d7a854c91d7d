"""Bit-exact file formats: point clouds, named-tensor containers, metric logs.

Point clouds: binary format starts with magic ``PCS1``, then point count
(u64), feature width (u32), and per point 3xf32 position, Cf xf32 features,
i32 label, all little-endian. A whitespace text format (``x y z f... label``
per line) loads interchangeably; loading sniffs the magic.

Model parameters: container starts with magic ``HTM1`` and stores named
float64 tensors (u32 name length, UTF-8 name, u32 ndim, u64 dims, raw
little-endian doubles).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .pointcloud import PointCloud

PCS_MAGIC = b"PCS1"
HTM_MAGIC = b"HTM1"


# --------------------------------------------------------------------------
# Point clouds
# --------------------------------------------------------------------------


def save_point_cloud(path, pc: PointCloud, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        p, cf = pc.num_points, pc.features.shape[1]
        row = np.dtype(
            [("pos", "<f4", 3), ("feat", "<f4", cf), ("label", "<i4")]
        )
        rows = np.empty(p, dtype=row)
        rows["pos"] = pc.positions.astype(np.float32)
        rows["feat"] = pc.features.astype(np.float32).reshape(p, cf)
        rows["label"] = pc.labels.astype(np.int32)
        with open(path, "wb") as fh:
            fh.write(PCS_MAGIC)
            fh.write(struct.pack("<QI", p, cf))
            fh.write(rows.tobytes())
    elif fmt == "text":
        cols = np.hstack([pc.positions, pc.features, pc.labels[:, None].astype(np.float64)])
        with open(path, "w") as fh:
            for r in cols:
                vals = " ".join(format(v, ".8g") for v in r[:-1])
                fh.write(f"{vals} {int(r[-1])}\n")
    else:
        raise InputError(f"unknown point cloud format {fmt!r}")


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == PCS_MAGIC:
            p, cf = struct.unpack("<QI", fh.read(12))
            row = np.dtype([("pos", "<f4", 3), ("feat", "<f4", cf), ("label", "<i4")])
            raw = fh.read(p * row.itemsize)
            if len(raw) != p * row.itemsize:
                raise InputError(f"{path}: truncated point cloud payload")
            rows = np.frombuffer(raw, dtype=row)
            return PointCloud(
                rows["pos"].astype(np.float64),
                rows["feat"].astype(np.float64).reshape(p, cf),
                rows["label"].astype(np.int64),
            )
    # fall through to the text reader
    values = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise InputError(f"{path}:{ln}: need at least x y z label")
            values.append([float(v) for v in parts])
    if not values:
        raise InputError(f"{path}: no points found")
    widths = {len(v) for v in values}
    if len(widths) != 1:
        raise InputError(f"{path}: inconsistent column counts {sorted(widths)}")
    arr = np.asarray(values)
    return PointCloud(arr[:, :3], arr[:, 3:-1], arr[:, -1].astype(np.int64))


# --------------------------------------------------------------------------
# Named-tensor container
# --------------------------------------------------------------------------


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(HTM_MAGIC)
        fh.write(struct.pack("<Q", len(named)))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != HTM_MAGIC:
            raise InputError(f"{path}: not a named-tensor container (bad magic)")
        (count,) = struct.unpack("<Q", fh.read(8))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise InputError(f"{path}: truncated tensor {name!r}")
            named[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return named
