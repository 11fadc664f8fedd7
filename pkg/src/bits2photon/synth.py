"""Deterministic synthetic scenes: textured sphere and cube surfaces
voxelized to point clouds, plus reference splat sets for ground-truth
rendering.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ConfigError
from .render import GaussianSet
from .voxel import PointCloud, make_point_cloud


def _fibonacci_sphere(count: int) -> np.ndarray:
    """Near-uniform unit directions (golden-angle spiral)."""
    i = np.arange(count, dtype=np.float64)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def checker_sphere(bit_depth: int, samples: int = 20000, radius_frac: float = 0.38,
                   checks: int = 6, colors=((0.9, 0.15, 0.1), (0.95, 0.9, 0.85))) -> PointCloud:
    """Sphere surface with a latitude/longitude checkerboard texture."""
    if not 0 < radius_frac < 0.5:
        raise ConfigError("radius fraction must lie in (0, 0.5)")
    grid = float(2 ** bit_depth)
    dirs = _fibonacci_sphere(samples)
    pts = grid / 2 + dirs * (radius_frac * grid)
    theta = np.arccos(np.clip(dirs[:, 2], -1, 1))
    phi = np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * math.pi)
    cell = (np.floor(theta / math.pi * checks) +
            np.floor(phi / (2 * math.pi) * checks)).astype(np.int64) % 2
    palette = np.asarray(colors, dtype=np.float64)
    vox = np.clip(np.floor(pts).astype(np.int64), 0, 2 ** bit_depth - 1)
    return make_point_cloud(vox, palette[cell], bit_depth)


def gradient_cube(bit_depth: int, samples_per_face: int = 4000,
                  size_frac: float = 0.55, seed: int = 0) -> PointCloud:
    """Axis-aligned cube surface whose color is its normalized position."""
    if not 0 < size_frac <= 1.0:
        raise ConfigError("size fraction must lie in (0, 1]")
    grid = float(2 ** bit_depth)
    half = size_frac * grid / 2
    rng = np.random.default_rng(seed)
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            uv = rng.uniform(-half, half, (samples_per_face, 2))
            pts = np.zeros((samples_per_face, 3))
            others = [a for a in range(3) if a != axis]
            pts[:, others[0]] = uv[:, 0]
            pts[:, others[1]] = uv[:, 1]
            pts[:, axis] = sign * half
            faces.append(pts)
    pts = np.concatenate(faces) + grid / 2
    vox = np.clip(np.floor(pts).astype(np.int64), 0, 2 ** bit_depth - 1)
    colors = vox.astype(np.float64) / (2 ** bit_depth - 1)
    return make_point_cloud(vox, colors, bit_depth)


def union(a: PointCloud, b: PointCloud) -> PointCloud:
    if a.bit_depth != b.bit_depth:
        raise ConfigError("clouds must share a bit depth")
    return make_point_cloud(np.concatenate([a.points, b.points]),
                            np.concatenate([a.colors, b.colors]), a.bit_depth)


def reference_gaussians(pc: PointCloud, scale: float = 0.7,
                        dtype=torch.float32) -> GaussianSet:
    """One isotropic opaque splat per voxel, used as rendering ground truth."""
    n = pc.num_points
    means = torch.from_numpy(pc.points.astype(np.float64) + 0.5).to(dtype)
    quats = torch.zeros(n, 4, dtype=dtype)
    quats[:, 0] = 1.0
    return GaussianSet(means,
                       torch.full((n, 3), scale, dtype=dtype), quats,
                       torch.ones(n, dtype=dtype),
                       torch.from_numpy(pc.colors).to(dtype))
