"""Sparse 3D convolution primitives.

A kernel map lists, per kernel offset, the (input_row, output_row) pairs whose
coordinates satisfy in = out + offset. Convolutions are then gather/matmul/
scatter reductions with a fixed summation order over the offset list, so
results do not depend on any parallel schedule.

Offset enumeration order is Morton order of (offset + center); weight tensors
are serialized in that order and are not portable under any other convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, DimensionError
from .voxel import SparseTensor, morton_keys

# Granularity for canonicalizing weight directions in the geometry-invariant
# conv; 2^-38 sits well below the 1e-10 oracle tolerances while staying far
# above float64 rounding noise, making the op invariant to weight rescaling.
_SNAP = 2.0 ** 38


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Symmetric offsets for an odd same-level kernel, Morton-ordered."""
    if kernel_size % 2 != 1:
        raise ConfigError(f"same-level kernels must be odd, got {kernel_size}")
    half = kernel_size // 2
    rng = np.arange(-half, half + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    bits = max(1, int(np.ceil(np.log2(kernel_size))))
    order = np.argsort(morton_keys(grid + half, bits), kind="stable")
    return grid[order]


def child_offsets() -> np.ndarray:
    """The 8 sub-voxel offsets {0,1}^3 in Morton order (x least significant)."""
    b = np.arange(8)
    return np.stack([b & 1, (b >> 1) & 1, (b >> 2) & 1], axis=1).astype(np.int64)


@dataclass
class ConvParams:
    """weights: (num_offsets, C_in, C_out); bias: optional (C_out,)."""

    weights: torch.Tensor
    bias: Optional[torch.Tensor] = None

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class KernelMap:
    kernel_size: int
    offsets: np.ndarray
    pairs: list  # per offset: (in_rows, out_rows) int64 arrays
    in_coords: np.ndarray
    out_coords: np.ndarray
    level: int

    def active_matrix(self, dtype, num_out: int) -> torch.Tensor:
        """Dense (num_out, num_offsets) {0,1} matrix of occupied kernel taps."""
        act = torch.zeros(num_out, len(self.offsets), dtype=dtype)
        for o, (_, out_rows) in enumerate(self.pairs):
            if len(out_rows):
                act[torch.from_numpy(out_rows), o] = 1.0
        return act


def build_kernel_map(in_coords: np.ndarray, out_coords: np.ndarray,
                     kernel_size: int, level: int) -> KernelMap:
    """Pair input and output rows for every kernel offset via Morton-key search.

    Both coordinate lists must already be in canonical Morton order at `level`.
    """
    offsets = kernel_offsets(kernel_size)
    in_keys = morton_keys(in_coords, level)
    hi = 1 << level
    pairs = []
    out_idx = np.arange(len(out_coords), dtype=np.int64)
    for off in offsets:
        cand = out_coords + off
        valid = ((cand >= 0) & (cand < hi)).all(axis=1)
        keys = morton_keys(cand[valid], level)
        pos = np.searchsorted(in_keys, keys)
        pos_c = np.minimum(pos, max(len(in_keys) - 1, 0))
        found = (pos < len(in_keys)) & (in_keys[pos_c] == keys) if len(in_keys) else np.zeros(len(keys), bool)
        pairs.append((pos_c[found], out_idx[valid][found]))
    return KernelMap(kernel_size, offsets, pairs, np.asarray(in_coords), np.asarray(out_coords), level)


def _check_channels(x: SparseTensor, p: ConvParams, num_offsets: int):
    if p.weights.shape[0] != num_offsets:
        raise DimensionError(f"weights carry {p.weights.shape[0]} offsets, kernel has {num_offsets}")
    if p.in_channels != x.channels:
        raise DimensionError(f"input has {x.channels} channels, weights expect {p.in_channels}")
    if p.bias is not None and p.bias.shape[0] != p.out_channels:
        raise DimensionError("bias length does not match output channels")


def sparse_conv(x: SparseTensor, km: KernelMap, p: ConvParams) -> SparseTensor:
    """Plain sparse convolution: out_u = sum_i W_i x_{u+i} (+ bias)."""
    _check_channels(x, p, len(km.offsets))
    n_out = len(km.out_coords)
    out = torch.zeros(n_out, p.out_channels, dtype=x.feats.dtype)
    for o, (in_rows, out_rows) in enumerate(km.pairs):
        if len(in_rows):
            out = out.index_add(0, torch.from_numpy(out_rows), x.feats[torch.from_numpy(in_rows)] @ p.weights[o])
    if p.bias is not None:
        out = out + p.bias
    return SparseTensor(km.level, km.out_coords, out)


def _canonical_direction(w: torch.Tensor) -> torch.Tensor:
    """Rescale the weight tensor to a fixed-precision unit-max direction.

    The geometry-invariant conv is scale-free in its weights, so only the
    direction matters. Dividing by the max magnitude and snapping to a 2^-38
    grid (float64 only) makes rescaled copies of the same weights produce
    bit-identical outputs. The gradient treats the scale as a constant, which
    is exact because the op's true gradient has no radial component.
    """
    s = w.detach().abs().max()
    if s == 0:
        return w
    wc = w / s
    if w.dtype == torch.float64:
        snapped = torch.round(wc * _SNAP) / _SNAP
        wc = wc + (snapped - wc).detach()
    return wc


def geom_invariant_conv(x: SparseTensor, km: KernelMap, p: ConvParams) -> SparseTensor:
    """Density-normalized sparse convolution.

    Each output channel is divided by the L2 norm of the kernel weights whose
    taps land on occupied input voxels, so the response magnitude does not grow
    with local point density.
    """
    _check_channels(x, p, len(km.offsets))
    w = _canonical_direction(p.weights)
    num = sparse_conv(x, km, ConvParams(w, None))
    wsq = (w * w).sum(dim=1)  # (num_offsets, C_out)
    act = km.active_matrix(x.feats.dtype, len(km.out_coords))
    den = torch.sqrt(act @ wsq).clamp_min(1e-12)
    out = num.feats / den
    if p.bias is not None:
        out = out + p.bias
    return SparseTensor(km.level, km.out_coords, out)


def transposed_conv_gen(x: SparseTensor, p: ConvParams) -> SparseTensor:
    """Generative 2x2x2 transposed convolution: each level-n voxel spawns all
    8 level-(n+1) children, child feature = x_u W_d."""
    if p.weights.shape[0] != 8:
        raise DimensionError(f"generative transposed conv needs 8 offset slices, got {p.weights.shape[0]}")
    if p.in_channels != x.channels:
        raise DimensionError(f"input has {x.channels} channels, weights expect {p.in_channels}")
    offs = child_offsets()
    n = x.num_points
    child_coords = (x.coords[:, None, :] * 2 + offs[None, :, :]).reshape(-1, 3)
    # parents are Morton-sorted and child key = (parent key << 3) | d, so the
    # interleaved output is already in canonical order
    feats = torch.einsum("nc,dco->ndo", x.feats, p.weights).reshape(n * 8, p.out_channels)
    if p.bias is not None:
        feats = feats + p.bias
    return SparseTensor(x.level + 1, child_coords, feats)


def pointwise_linear(x: SparseTensor, p: ConvParams) -> SparseTensor:
    """Per-point affine map (1x1x1 convolution)."""
    if p.weights.shape[0] != 1:
        raise DimensionError("pointwise layer expects a single offset slice")
    if p.in_channels != x.channels:
        raise DimensionError(f"input has {x.channels} channels, weights expect {p.in_channels}")
    out = x.feats @ p.weights[0]
    if p.bias is not None:
        out = out + p.bias
    return x.with_feats(out)


def _conv_fn(geom_invariant: bool):
    return geom_invariant_conv if geom_invariant else sparse_conv


def inception_res_block(x: SparseTensor, km: KernelMap, params: dict,
                        geom_invariant: bool = False) -> SparseTensor:
    """Two-branch inception residual block.

    Branch A: 3x3 C->C/4, 3x3 C/4->C/2. Branch B: 3x3 C->C/4, 1x1 C/4->C/4,
    3x3 C/4->C/2. ReLU after every internal conv; branches are concatenated
    back to C channels and added to the input. Zero weights give the identity.
    """
    c = x.channels
    if c % 4 != 0:
        raise ConfigError(f"inception block needs channels divisible by 4, got {c}")
    conv = _conv_fn(geom_invariant)
    a = conv(x, km, params["a1"]).feats.relu()
    a = conv(x.with_feats(a), km, params["a2"]).feats.relu()
    b = conv(x, km, params["b1"]).feats.relu()
    b = pointwise_linear(x.with_feats(b), params["b2"]).feats.relu()
    b = conv(x.with_feats(b), km, params["b3"]).feats.relu()
    return x.with_feats(x.feats + torch.cat([a, b], dim=1))


def res_block(x: SparseTensor, km: KernelMap, params: dict,
              geom_invariant: bool = False) -> SparseTensor:
    """Residual block: two 3x3 convs with ReLU, added to the input."""
    conv = _conv_fn(geom_invariant)
    h = conv(x, km, params["c1"]).feats.relu()
    h = conv(x.with_feats(h), km, params["c2"]).feats.relu()
    return x.with_feats(x.feats + h)
