"""Layered `.b2p` bitstream container and raw octree occupancy geometry codec.

Layout (little-endian):
    header, 24 bytes:
        magic "B2P1" | version u32 | N u8 | L u8 | M_max u8 | channels u8
        | model_hash u64 | geometry_len u32
    geometry chunk: occupancy bytes + crc32 u32
    per-level feature chunks, increasing level:
        level u8 | num_points u32 | payload_len u32 | payload | crc32 u32

The stream truncated after any complete chunk boundary is still decodable up
to the levels present: a level-M stream is a byte prefix of the level-(M+1)
stream from the same encoder run.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, TruncationError
from .voxel import morton_keys

MAGIC = b"B2P1"
VERSION = 1
HEADER_LEN = 24
_HEADER_FMT = "<4sIBBBBQI"


def _keys_to_coords(keys: np.ndarray) -> np.ndarray:
    """Invert Morton interleaving (x least significant bit of each triplet)."""
    def compact(v):
        v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
        v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
        v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
        v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
        v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
        v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
        return v.astype(np.int64)

    keys = keys.astype(np.uint64)
    return np.stack([compact(keys), compact(keys >> np.uint64(1)), compact(keys >> np.uint64(2))], axis=1)


def encode_geometry(coords: np.ndarray, bit_depth: int) -> bytes:
    """Breadth-first occupancy bytes: one byte (8 child bits) per occupied node
    of levels 0..N-1, nodes in Morton order, coarse levels first."""
    keys = morton_keys(np.asarray(coords, dtype=np.int64), bit_depth)
    keys = np.sort(keys)
    level_keys = [keys]
    for _ in range(bit_depth):
        level_keys.append(np.unique(level_keys[-1] >> 3))
    level_keys.reverse()  # index n holds level-n keys
    out = bytearray()
    for n in range(bit_depth):
        parents = level_keys[n]
        children = level_keys[n + 1]
        occ = np.zeros(len(parents), dtype=np.uint8)
        slots = np.searchsorted(parents, children >> 3)
        np.bitwise_or.at(occ, slots, np.uint8(1) << (children & 7).astype(np.uint8))
        out.extend(occ.tobytes())
    return bytes(out)


def decode_geometry(data: bytes, bit_depth: int) -> list:
    """Inverse of encode_geometry; returns Morton-sorted coords per level 0..N."""
    buf = np.frombuffer(data, dtype=np.uint8)
    keys = np.zeros(1, dtype=np.int64)
    levels = [_keys_to_coords(keys)]
    pos = 0
    bits = np.arange(8, dtype=np.int64)
    for n in range(bit_depth):
        count = len(keys)
        if pos + count > len(buf):
            raise FormatError(f"geometry chunk too short at level {n + 1}")
        occ = buf[pos:pos + count].astype(np.int64)
        pos += count
        mask = (occ[:, None] >> bits[None, :]) & 1
        par, child = np.nonzero(mask)
        keys = (keys[par] << 3) | bits[child]
        levels.append(_keys_to_coords(keys))
    if pos != len(buf):
        raise FormatError("trailing bytes in geometry chunk")
    return levels


@dataclass
class LayeredBitstream:
    bit_depth: int
    base_level: int
    max_level: int  # model's top coded level; chunks present may stop earlier
    channels: int
    model_hash: int
    geometry: bytes
    chunks: list = field(default_factory=list)  # (level, num_points, payload)

    @property
    def top_chunk_level(self) -> int:
        return max(c[0] for c in self.chunks) if self.chunks else self.base_level - 1

    def feature_bits(self) -> dict:
        return {lvl: len(payload) * 8 for lvl, _, payload in self.chunks}


def serialize(stream: LayeredBitstream) -> bytes:
    out = bytearray()
    out += struct.pack(
        _HEADER_FMT, MAGIC, VERSION, stream.bit_depth, stream.base_level,
        stream.max_level, stream.channels, stream.model_hash, len(stream.geometry),
    )
    out += stream.geometry
    out += struct.pack("<I", zlib.crc32(stream.geometry))
    for level, num_points, payload in sorted(stream.chunks):
        out += struct.pack("<BII", level, num_points, len(payload))
        out += payload
        out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def deserialize(data: bytes) -> LayeredBitstream:
    if len(data) < HEADER_LEN:
        raise FormatError("stream shorter than header")
    magic, version, n, l, m, ch, model_hash, geom_len = struct.unpack_from(_HEADER_FMT, data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = HEADER_LEN
    if pos + geom_len + 4 > len(data):
        raise TruncationError("stream cut inside the geometry chunk", level=0)
    geometry = data[pos:pos + geom_len]
    pos += geom_len
    (crc,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if crc != zlib.crc32(geometry):
        raise FormatError("geometry chunk checksum mismatch")
    stream = LayeredBitstream(n, l, m, ch, model_hash, geometry)
    while pos < len(data):
        if pos + 9 > len(data):
            raise TruncationError("stream cut inside a chunk header", level=None)
        level, num_points, plen = struct.unpack_from("<BII", data, pos)
        pos += 9
        if pos + plen + 4 > len(data):
            raise TruncationError(f"stream cut inside level {level} payload", level=level)
        payload = data[pos:pos + plen]
        pos += plen
        (crc,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if crc != zlib.crc32(payload):
            raise FormatError(f"level {level} chunk checksum mismatch")
        stream.chunks.append((level, num_points, payload))
    return stream


def truncate_to_level(data: bytes, max_level: int) -> bytes:
    """Byte prefix of a serialized stream keeping chunks up to max_level."""
    stream = deserialize(data)
    pos = HEADER_LEN + len(stream.geometry) + 4
    for level, _, payload in sorted(stream.chunks):
        if level > max_level:
            break
        pos += 9 + len(payload) + 4
    return data[:pos]
