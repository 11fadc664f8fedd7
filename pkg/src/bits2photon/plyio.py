"""Minimal PLY reader/writer for colored point clouds.

Supports ascii and binary_little_endian files carrying at least the
x, y, z, red, green, blue vertex properties. Coordinates are quantized to the
integer voxel grid on load; duplicate voxels are merged by color averaging.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, RangeError
from .voxel import PointCloud, make_point_cloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    line = fh.readline().strip()
    if line != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("unterminated PLY header")
        parts = raw.decode("ascii", "replace").strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError("list properties are not supported on vertices")
            props.append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise FormatError("PLY has no vertex element")
    names = [p[0] for p in props]
    for need in ("x", "y", "z", "red", "green", "blue"):
        if need not in names:
            raise FormatError(f"PLY is missing vertex property {need!r}")
    return fmt, count, props


def load_ply(path, bit_depth: int = 10) -> PointCloud:
    """Read a colored PLY, round coordinates to integers, scale colors to [0,1]."""
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh)
        if fmt == "ascii":
            rows = np.loadtxt(fh, dtype=np.float64, max_rows=count, ndmin=2)
            if rows.shape[0] != count or rows.shape[1] < len(props):
                raise FormatError("PLY vertex data does not match header")
            data = {name: rows[:, i] for i, (name, _) in enumerate(props)}
        else:
            dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) != dtype.itemsize * count:
                raise FormatError("truncated PLY vertex data")
            arr = np.frombuffer(buf, dtype=dtype)
            data = {name: arr[name].astype(np.float64) for name, _ in props}
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1)
    pts = np.round(pts).astype(np.int64)
    hi = 1 << bit_depth
    bad = ((pts < 0) | (pts >= hi)).any(axis=1)
    if bad.any():
        idx = int(np.argmax(bad))
        raise RangeError(f"vertex {idx} quantizes to {pts[idx].tolist()}, outside [0, {hi})")
    colors = np.stack([data["red"], data["green"], data["blue"]], axis=1) / 255.0
    return make_point_cloud(pts, colors, bit_depth)


def save_ply(pc: PointCloud, path, binary: bool = True):
    """Write a PointCloud as PLY with uint coordinates and uchar colors."""
    colors = np.clip(np.round(pc.colors * 255.0), 0, 255).astype(np.uint8)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {pc.num_points}",
        "property int x",
        "property int y",
        "property int z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            for p, c in zip(pc.points, colors):
                fh.write(struct.pack("<iiiBBB", *p, *c))
        else:
            for p, c in zip(pc.points, colors):
                fh.write(f"{p[0]} {p[1]} {p[2]} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))
