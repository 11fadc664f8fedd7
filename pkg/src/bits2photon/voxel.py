"""Voxel grids, Morton ordering, octree level hierarchy, and cross-level pooling.

Coordinates live on integer grids: level n spans [0, 2^n - 1]^3. All sparse
tensors keep their coordinates sorted in Morton order (x bit least significant)
— this ordering is normative: the entropy coder visits points in this order on
both the encoder and decoder side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ConsistencyError, RangeError


def _part1by2(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of v so that bit i lands at position 3*i."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(coords: np.ndarray, bits: int) -> np.ndarray:
    """Vectorized Morton keys for an (N, 3) integer coordinate array."""
    coords = np.asarray(coords, dtype=np.int64)
    if bits > 21:
        raise RangeError(f"morton keys support at most 21 bits per axis, got {bits}")
    if coords.size and (coords.min() < 0 or coords.max() >= (1 << bits)):
        bad = int(np.argmax((coords < 0).any(axis=1) | (coords >= (1 << bits)).any(axis=1)))
        raise RangeError(f"coordinate {coords[bad].tolist()} out of [0, 2^{bits}) at row {bad}")
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    key = _part1by2(x) | (_part1by2(y) << np.uint64(1)) | (_part1by2(z) << np.uint64(2))
    return key.astype(np.int64)


def morton_key(coord, bits: int) -> int:
    """Bit-interleaved key of one 3-vector; x occupies the least significant bit
    of each triplet, then y, then z."""
    return int(morton_keys(np.asarray(coord, dtype=np.int64).reshape(1, 3), bits)[0])


def morton_sort(coords: np.ndarray, bits: int) -> np.ndarray:
    """Permutation that puts coords into canonical Morton order."""
    return np.argsort(morton_keys(coords, bits), kind="stable")


@dataclass
class PointCloud:
    """Voxelized colored point cloud at bit depth N.

    points: (P, 3) int64 in [0, 2^N - 1]^3, unique, Morton-sorted.
    colors: (P, 3) float64 in [0, 1].
    """

    points: np.ndarray
    colors: np.ndarray
    bit_depth: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ConsistencyError("points/colors row count mismatch")
        if not np.isfinite(self.colors).all():
            raise RangeError("non-finite color value")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise RangeError("color channel outside [0, 1]")
        hi = 1 << self.bit_depth
        if self.points.size and (self.points.min() < 0 or self.points.max() >= hi):
            bad = int(np.argmax(((self.points < 0) | (self.points >= hi)).any(axis=1)))
            raise RangeError(f"point {self.points[bad].tolist()} outside [0, {hi}) at row {bad}")

    @property
    def num_points(self) -> int:
        return len(self.points)


def make_point_cloud(points: np.ndarray, colors: np.ndarray, bit_depth: int) -> PointCloud:
    """Canonicalize raw (possibly duplicated, unsorted) voxel points into a
    PointCloud: duplicates are merged by averaging their colors."""
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    keys = morton_keys(points, bit_depth)
    order = np.argsort(keys, kind="stable")
    keys, points, colors = keys[order], points[order], colors[order]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    if len(uniq) != len(keys):
        merged = np.zeros((len(uniq), 3), dtype=np.float64)
        np.add.at(merged, inverse, colors)
        merged /= counts[:, None]
        first = np.zeros(len(uniq), dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(keys) - 1, -1, -1)
        points, colors = points[first], merged
    return PointCloud(points, colors, bit_depth)


@dataclass
class SparseTensor:
    """Per-point feature rows attached to Morton-sorted level-n coordinates."""

    level: int
    coords: np.ndarray
    feats: torch.Tensor

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.feats.shape[0] != len(self.coords):
            raise ConsistencyError(
                f"feature rows ({self.feats.shape[0]}) != coord rows ({len(self.coords)})"
            )

    @property
    def num_points(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats: torch.Tensor) -> "SparseTensor":
        return SparseTensor(self.level, self.coords, feats)


@dataclass
class OctreeHierarchy:
    """Coordinate sets for levels base..top with parent/child index maps.

    parent_of[n] maps each level-n point to its parent's row at level n-1
    (defined for n > base). children_of is derived lazily from parent_of.
    """

    base_level: int
    top_level: int
    levels: dict = field(default_factory=dict)
    parent_of: dict = field(default_factory=dict)

    def children_of(self, n: int) -> list:
        """Per-parent child row indices at level n+1 (1..8 entries each)."""
        par = self.parent_of[n + 1]
        out = [[] for _ in range(len(self.levels[n]))]
        for child, p in enumerate(par):
            out[p].append(child)
        return out


def build_hierarchy(pc: PointCloud, base_level: int) -> OctreeHierarchy:
    """Construct the octree level chain from level N down to base_level by
    floor-halving coordinates and deduplicating."""
    top = pc.bit_depth
    if base_level > top:
        raise ConfigError(f"base level {base_level} exceeds bit depth {top}")
    if pc.num_points == 0:
        raise ConfigError("cannot build a hierarchy from an empty cloud")
    hier = OctreeHierarchy(base_level=base_level, top_level=top)
    coords = pc.points
    hier.levels[top] = coords
    for n in range(top, base_level, -1):
        parents = coords >> 1
        keys = morton_keys(parents, n - 1)
        uniq_keys, inverse = np.unique(keys, return_inverse=True)
        # np.unique sorts keys, so parent coords come out Morton-sorted
        first = np.full(len(uniq_keys), -1, dtype=np.int64)
        first[inverse[::-1]] = np.arange(len(keys) - 1, -1, -1)
        parent_coords = parents[first]
        hier.levels[n - 1] = parent_coords
        hier.parent_of[n] = inverse.astype(np.int64)
        coords = parent_coords
    return hier


def _check_level(src: SparseTensor, hier: OctreeHierarchy, n: int):
    if src.level != n:
        raise ConsistencyError(f"tensor is at level {src.level}, expected {n}")
    if n not in hier.levels or len(hier.levels[n]) != src.num_points:
        raise ConsistencyError(f"tensor does not match hierarchy level {n}")


def avg_pool_down(src: SparseTensor, hier: OctreeHierarchy) -> SparseTensor:
    """Parent feature = mean of its occupied children's features."""
    n = src.level
    _check_level(src, hier, n)
    if n - 1 not in hier.levels:
        raise ConsistencyError(f"hierarchy has no level {n - 1}")
    par = torch.from_numpy(hier.parent_of[n])
    num_parents = len(hier.levels[n - 1])
    sums = torch.zeros(num_parents, src.channels, dtype=src.feats.dtype)
    sums.index_add_(0, par, src.feats)
    counts = torch.zeros(num_parents, dtype=src.feats.dtype)
    counts.index_add_(0, par, torch.ones(src.num_points, dtype=src.feats.dtype))
    return SparseTensor(n - 1, hier.levels[n - 1], sums / counts[:, None])


def upsample_copy(src: SparseTensor, hier: OctreeHierarchy) -> SparseTensor:
    """Zero-order hold: every occupied child receives its parent's feature row."""
    n = src.level
    _check_level(src, hier, n)
    if n + 1 not in hier.levels:
        raise ConsistencyError(f"hierarchy has no level {n + 1}")
    par = torch.from_numpy(hier.parent_of[n + 1])
    return SparseTensor(n + 1, hier.levels[n + 1], src.feats[par])


def hierarchy_from_levels(levels: dict, base_level: int, top_level: int) -> OctreeHierarchy:
    """Rebuild parent/child maps from per-level Morton-sorted coordinate sets
    (e.g. as decoded from a geometry stream)."""
    hier = OctreeHierarchy(base_level=base_level, top_level=top_level)
    for n in range(base_level, top_level + 1):
        hier.levels[n] = np.asarray(levels[n], dtype=np.int64)
    for n in range(base_level + 1, top_level + 1):
        child_keys = morton_keys(hier.levels[n] >> 1, n - 1)
        parent_keys = morton_keys(hier.levels[n - 1], n - 1)
        idx = np.searchsorted(parent_keys, child_keys).clip(max=max(len(parent_keys) - 1, 0))
        if len(parent_keys) == 0 or not np.array_equal(parent_keys[idx], child_keys):
            raise ConsistencyError(f"level {n} coordinates have no parent at level {n - 1}")
        hier.parent_of[n] = idx.astype(np.int64)
    return hier
