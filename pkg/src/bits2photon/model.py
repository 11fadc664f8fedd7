"""Network stages and the hierarchical coding pipelines.

Five stages operate per octree level: feature extraction/conversion to 64
channels, conditional squeeze to 8 channels, a predictive entropy model
(per-point Gaussian mean/scale from the coarser-level context), conditional
feature reconstruction, and a splat-generation head emitting 14 raw channels
per output point.

Conditioning is closed-loop: the encoder reconstructs features exactly the way
the decoder will (from the integer symbols, not the unquantized values), so
both sides hold bit-identical context at every level.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import entropy
from .bitstream import LayeredBitstream, decode_geometry, encode_geometry
from .errors import (ConfigError, ConsistencyError, IncompatibilityError,
                     NumericError, TruncationError)
from .render import GaussianSet
from .sparse import (ConvParams, build_kernel_map, geom_invariant_conv,
                     inception_res_block, pointwise_linear, res_block,
                     transposed_conv_gen)
from .voxel import (PointCloud, SparseTensor, avg_pool_down, build_hierarchy,
                    hierarchy_from_levels, upsample_copy)

CHANNELS = 64
SQUEEZED = 8
RAW_CHANNELS = 14
SCALE_MIN = 1e-4


@dataclass
class ModelConfig:
    bit_depth: int = 10  # N: finest octree level
    base_level: int = 7  # L: coarsest coded level
    min_render_level: int = 8  # lowest level with a generation head
    max_level: int = 9  # M_max: finest coded level

    def __post_init__(self):
        if not (1 <= self.base_level <= self.min_render_level <= self.max_level
                < self.bit_depth):
            raise ConfigError(
                f"need 1 <= base {self.base_level} <= min render "
                f"{self.min_render_level} <= max {self.max_level} < depth {self.bit_depth}")

    @property
    def coding_levels(self) -> range:
        return range(self.base_level, self.max_level + 1)

    @property
    def render_levels(self) -> range:
        return range(self.min_render_level, self.max_level + 1)

    def generative(self, level: int) -> bool:
        """Generation spawns 8 sub-points at coarse levels, is one-to-one at
        the two finest levels."""
        return level <= self.bit_depth - 2

    def to_dict(self) -> dict:
        return {"bit_depth": self.bit_depth, "base_level": self.base_level,
                "min_render_level": self.min_render_level, "max_level": self.max_level}


class B2PModel:
    """Parameter store for all per-level stages.

    Parameters are plain tensors with requires_grad set, addressable by
    dotted names for checkpointing and optimizer state.
    """

    def __init__(self, config: ModelConfig, dtype=torch.float32, seed: int = 0):
        self.config = config
        self.dtype = dtype
        self._tensors: dict[str, torch.Tensor] = {}
        rng = np.random.default_rng(seed)
        c, s = CHANNELS, SQUEEZED
        n_top = config.bit_depth

        self.convert = {n_top: self._convert_stage(rng, f"convert.{n_top}", 3)}
        self.squeeze, self.entropy, self.recon = {}, {}, {}
        for n in config.coding_levels:
            self.convert[n] = self._convert_stage(rng, f"convert.{n}", c)
            self.squeeze[n] = {
                "l1": self._conv(rng, f"squeeze.{n}.l1", 1, 2 * c, c),
                "l2": self._conv(rng, f"squeeze.{n}.l2", 1, c, s),
            }
            self.entropy[n] = {
                "c1": self._conv(rng, f"entropy.{n}.c1", 27, c, c),
                "irb1": self._irb(rng, f"entropy.{n}.irb1", c),
                "irb2": self._irb(rng, f"entropy.{n}.irb2", c),
                "mu": self._conv(rng, f"entropy.{n}.mu", 1, c, s),
                "sigma": self._conv(rng, f"entropy.{n}.sigma", 1, c, s),
            }
            self.recon[n] = {
                "l1": self._conv(rng, f"recon.{n}.l1", 1, s + c, c),
                "irb1": self._irb(rng, f"recon.{n}.irb1", c),
                "irb2": self._irb(rng, f"recon.{n}.irb2", c),
                "l3": self._conv(rng, f"recon.{n}.l3", 1, c, c),
            }
        self.gauss = {}
        for m in config.render_levels:
            mid_offsets = 8 if config.generative(m) else 27
            self.gauss[m] = {
                "c1": self._conv(rng, f"gauss.{m}.c1", 27, c, c),
                "rb1": self._rb(rng, f"gauss.{m}.rb1", c),
                "rb2": self._rb(rng, f"gauss.{m}.rb2", c),
                "mid": self._conv(rng, f"gauss.{m}.mid", mid_offsets, c, c),
                "rb3": self._rb(rng, f"gauss.{m}.rb3", c),
                "rb4": self._rb(rng, f"gauss.{m}.rb4", c),
                "head": self._conv(rng, f"gauss.{m}.head", 27, c, RAW_CHANNELS),
            }

    def _register(self, name: str, arr: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(arr).to(self.dtype).requires_grad_(True)
        self._tensors[name] = t
        return t

    def _conv(self, rng, name: str, offsets: int, cin: int, cout: int) -> ConvParams:
        fan_in = offsets * cin
        wb = math.sqrt(6.0 / fan_in)
        bb = 1.0 / math.sqrt(fan_in)
        w = self._register(name + ".w", rng.uniform(-wb, wb, (offsets, cin, cout)))
        b = self._register(name + ".b", rng.uniform(-bb, bb, cout))
        return ConvParams(w, b)

    def _irb(self, rng, name: str, c: int) -> dict:
        return {
            "a1": self._conv(rng, name + ".a1", 27, c, c // 4),
            "a2": self._conv(rng, name + ".a2", 27, c // 4, c // 2),
            "b1": self._conv(rng, name + ".b1", 27, c, c // 4),
            "b2": self._conv(rng, name + ".b2", 1, c // 4, c // 4),
            "b3": self._conv(rng, name + ".b3", 27, c // 4, c // 2),
        }

    def _rb(self, rng, name: str, c: int) -> dict:
        return {"c1": self._conv(rng, name + ".c1", 27, c, c),
                "c2": self._conv(rng, name + ".c2", 27, c, c)}

    def _convert_stage(self, rng, name: str, cin: int) -> dict:
        return {"c1": self._conv(rng, name + ".c1", 27, cin, CHANNELS),
                "irb1": self._irb(rng, name + ".irb1", CHANNELS),
                "irb2": self._irb(rng, name + ".irb2", CHANNELS),
                "c2": self._conv(rng, name + ".c2", 27, CHANNELS, CHANNELS)}

    def named_parameters(self) -> dict:
        return dict(self._tensors)

    def parameters(self) -> list:
        return [self._tensors[k] for k in sorted(self._tensors)]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def load_tensor(self, name: str, arr: np.ndarray):
        t = self._tensors[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ConsistencyError(
                f"parameter {name}: stored shape {tuple(arr.shape)} != expected {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype))

    def manifest(self) -> dict:
        """Config plus per-tensor shape and content digest; the checkpoint
        format stores this verbatim and the stream header hashes it."""
        tensors = []
        for name in sorted(self._tensors):
            t = self._tensors[name]
            digest = hashlib.sha256(
                t.detach().to(torch.float32).numpy().tobytes()).hexdigest()
            tensors.append({"name": name, "shape": list(t.shape), "digest": digest})
        return {"format": "b2p-checkpoint", "version": 1,
                "config": self.config.to_dict(), "tensors": tensors}

    def hash(self) -> int:
        """64-bit digest of the checkpoint manifest (config + all weights)."""
        blob = json.dumps(self.manifest(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def feature_convert(x: SparseTensor, km, p: dict) -> SparseTensor:
    h = geom_invariant_conv(x, km, p["c1"])
    h = inception_res_block(h, km, p["irb1"])
    h = inception_res_block(h, km, p["irb2"])
    return geom_invariant_conv(h, km, p["c2"])


def _same_coords(a: SparseTensor, b: SparseTensor):
    if a.level != b.level or a.num_points != b.num_points:
        raise ConsistencyError("tensors must share coordinates")


def feature_squeeze(x: SparseTensor, ctx: SparseTensor, p: dict) -> SparseTensor:
    _same_coords(x, ctx)
    h = x.with_feats(torch.cat([x.feats, ctx.feats], dim=1))
    h = h.with_feats(pointwise_linear(h, p["l1"]).feats.relu())
    return pointwise_linear(h, p["l2"])


def entropy_predict(ctx: SparseTensor, km, p: dict):
    """Per-point Gaussian (mu, sigma) for the squeezed symbols, from context."""
    h = ctx.with_feats(geom_invariant_conv(ctx, km, p["c1"]).feats.relu())
    h = inception_res_block(h, km, p["irb1"], geom_invariant=True)
    h = inception_res_block(h, km, p["irb2"], geom_invariant=True)
    mu = pointwise_linear(h, p["mu"]).feats
    sigma = pointwise_linear(h, p["sigma"]).feats.exp().clamp(entropy.SIGMA_MIN,
                                                              entropy.SIGMA_MAX)
    return mu, sigma


def feature_reconstruct(q: SparseTensor, ctx: SparseTensor, km, p: dict) -> SparseTensor:
    _same_coords(q, ctx)
    h = q.with_feats(torch.cat([q.feats, ctx.feats], dim=1))
    h = h.with_feats(pointwise_linear(h, p["l1"]).feats.relu())
    h = inception_res_block(h, km, p["irb1"])
    h = inception_res_block(h, km, p["irb2"])
    return pointwise_linear(h, p["l3"])


def _check_finite(t: torch.Tensor, channel: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite gaussian output in channel group: {channel}")


def raw_to_gaussians(raw: SparseTensor, bit_depth: int, code_level: int,
                     generative: bool) -> GaussianSet:
    """Map 14 raw head channels to renderable splat parameters.

    Means are voxel centers (in level-N units) plus a tanh-bounded offset of
    one coded-level voxel; scales are exp-mapped around half a voxel and
    clamped; quaternions are normalized (identity fallback); opacity is
    sigmoid in generative mode, exactly 1 otherwise.
    """
    f = raw.feats
    voxel = 2.0 ** (bit_depth - code_level)
    step = 2.0 ** (bit_depth - raw.level)
    centers = (torch.from_numpy(raw.coords).to(f.dtype) + 0.5) * step
    means = centers + torch.tanh(f[:, 0:3]) * voxel
    _check_finite(means, "mean offset")
    scales = (torch.exp(f[:, 3:6]) * (voxel / 2)).clamp(SCALE_MIN, 4.0 * voxel)
    _check_finite(scales, "scale")
    q = f[:, 6:10]
    norm = q.norm(dim=1, keepdim=True)
    ident = torch.zeros_like(q)
    ident[:, 0] = 1.0
    quats = torch.where(norm < 1e-8, ident, q / norm.clamp_min(1e-8))
    _check_finite(quats, "quaternion")
    if generative:
        opac = torch.sigmoid(f[:, 10])
    else:
        opac = torch.ones_like(f[:, 10])
    _check_finite(opac, "opacity")
    colors = torch.sigmoid(f[:, 11:14])
    _check_finite(colors, "color")
    return GaussianSet(means, scales, quats, opac, colors)


def gaussian_generate(recon: SparseTensor, model: B2PModel) -> GaussianSet:
    """Emit splats from the reconstructed features at a render level."""
    m = recon.level
    cfg = model.config
    if m not in model.gauss:
        raise ConfigError(f"no generation head at level {m}")
    p = model.gauss[m]
    km = build_kernel_map(recon.coords, recon.coords, 3, m)
    h = recon.with_feats(geom_invariant_conv(recon, km, p["c1"]).feats.relu())
    h = res_block(h, km, p["rb1"])
    h = res_block(h, km, p["rb2"])
    generative = cfg.generative(m)
    if generative:
        h = transposed_conv_gen(h, p["mid"])
        km = build_kernel_map(h.coords, h.coords, 3, h.level)
    else:
        h = geom_invariant_conv(h, km, p["mid"])
    h = res_block(h, km, p["rb3"])
    h = res_block(h, km, p["rb4"])
    raw = geom_invariant_conv(h, km, p["head"])
    return raw_to_gaussians(raw, cfg.bit_depth, m, generative)


@dataclass
class LevelCode:
    """Per-level coding record shared by encode, decode, and training."""

    level: int
    squeezed: torch.Tensor  # pre-quantization (encoder/training only)
    coded: torch.Tensor  # integer symbols as floats, or noisy proxy in training
    mu: torch.Tensor
    sigma: torch.Tensor
    recon: SparseTensor
    symbols: np.ndarray | None = None
    clipped: int = 0


def _feature_pyramid(model: B2PModel, hier, colors: np.ndarray) -> dict:
    """64-channel coding-side features for every coded level: extract at the
    top level, average-pool down, convert per level."""
    cfg = model.config
    top = cfg.bit_depth
    km_top = build_kernel_map(hier.levels[top], hier.levels[top], 3, top)
    x = SparseTensor(top, hier.levels[top],
                     torch.from_numpy(colors).to(model.dtype))
    h = feature_convert(x, km_top, model.convert[top])
    pooled = {}
    for n in range(top - 1, cfg.base_level - 1, -1):
        h = avg_pool_down(h, hier)
        if n <= cfg.max_level:
            pooled[n] = h
    return pooled


def _code_levels(model: B2PModel, hier, pooled: dict, kms: dict,
                 noise_gen: torch.Generator | None = None) -> list:
    """Run the conditional coding loop over base..max levels.

    With a noise generator the quantizer is replaced by additive uniform
    noise (training proxy); otherwise symbols are hard-quantized and the
    reconstruction path sees exactly what the decoder will see.
    """
    cfg = model.config
    records = []
    ctx_feats = None
    for n in cfg.coding_levels:
        coords = hier.levels[n]
        if ctx_feats is None:
            ctx_feats = torch.zeros(len(coords), CHANNELS, dtype=model.dtype)
        ctx = SparseTensor(n, coords, ctx_feats)
        mu, sigma = entropy_predict(ctx, kms[n], model.entropy[n])
        x_n = feature_convert(pooled[n], kms[n], model.convert[n])
        y = feature_squeeze(x_n, ctx, model.squeeze[n])
        if noise_gen is not None:
            noise = torch.rand(y.feats.shape, generator=noise_gen,
                               dtype=model.dtype) - 0.5
            coded = y.feats + noise
            symbols, clipped = None, 0
        else:
            symbols, clipped = entropy.quantize(
                y.feats.detach().to(torch.float64).numpy())
            coded = torch.from_numpy(symbols.astype(np.float64)).to(model.dtype)
        recon = feature_reconstruct(y.with_feats(coded), ctx, kms[n], model.recon[n])
        records.append(LevelCode(n, y.feats, coded, mu, sigma, recon,
                                 symbols, clipped))
        if n < cfg.max_level:
            ctx_feats = upsample_copy(recon, hier).feats
    return records


def encode_pipeline(pc: PointCloud, model: B2PModel,
                    max_level: int | None = None) -> LayeredBitstream:
    """Compress a point cloud into a layered stream up to max_level."""
    cfg = model.config
    if pc.bit_depth != cfg.bit_depth:
        raise ConfigError(f"cloud depth {pc.bit_depth} != model depth {cfg.bit_depth}")
    if max_level is None:
        max_level = cfg.max_level
    if not (cfg.base_level <= max_level <= cfg.max_level):
        raise ConfigError(f"max level {max_level} outside coded range "
                          f"[{cfg.base_level}, {cfg.max_level}]")
    with torch.no_grad():
        hier = build_hierarchy(pc, cfg.base_level)
        kms = {n: build_kernel_map(hier.levels[n], hier.levels[n], 3, n)
               for n in cfg.coding_levels}
        pooled = _feature_pyramid(model, hier, pc.colors)
        records = _code_levels(model, hier, pooled, kms)
    chunks = []
    feature_bits = 0.0
    for rec in records:
        if rec.level > max_level:
            break
        mu = rec.mu.to(torch.float64).numpy()
        sigma = rec.sigma.to(torch.float64).numpy()
        payload = entropy.encode_level(rec.symbols, mu, sigma)
        chunks.append((rec.level, rec.symbols.shape[0], payload))
        feature_bits += 8 * len(payload)
    return LayeredBitstream(
        bit_depth=cfg.bit_depth, base_level=cfg.base_level, max_level=cfg.max_level,
        channels=SQUEEZED, model_hash=model.hash(),
        geometry=encode_geometry(pc.points, cfg.bit_depth), chunks=chunks)


def decode_features(stream: LayeredBitstream, model: B2PModel,
                    max_level: int):
    """Decode reconstructed features for levels base..max_level."""
    cfg = model.config
    if stream.model_hash != model.hash():
        raise IncompatibilityError("stream was produced by a different model")
    if stream.bit_depth != cfg.bit_depth or stream.base_level != cfg.base_level:
        raise IncompatibilityError("stream level range does not match the model")
    if not (cfg.base_level <= max_level <= stream.max_level):
        raise ConfigError(f"requested level {max_level} outside stream range")
    available = {lvl: (count, payload) for lvl, count, payload in stream.chunks}
    all_levels = decode_geometry(stream.geometry, stream.bit_depth)
    hier = hierarchy_from_levels(
        {n: all_levels[n] for n in range(cfg.base_level, max_level + 1)},
        cfg.base_level, max_level)
    recons = {}
    with torch.no_grad():
        ctx_feats = None
        for n in range(cfg.base_level, max_level + 1):
            if n not in available:
                raise TruncationError(n)
            coords = hier.levels[n]
            count, payload = available[n]
            if count != len(coords):
                raise ConsistencyError(
                    f"level {n}: chunk declares {count} points, geometry has {len(coords)}")
            if ctx_feats is None:
                ctx_feats = torch.zeros(len(coords), CHANNELS, dtype=model.dtype)
            ctx = SparseTensor(n, coords, ctx_feats)
            km = build_kernel_map(coords, coords, 3, n)
            mu, sigma = entropy_predict(ctx, km, model.entropy[n])
            symbols = entropy.decode_level(
                payload, mu.to(torch.float64).numpy(),
                sigma.to(torch.float64).numpy(), (len(coords), SQUEEZED))
            coded = torch.from_numpy(symbols.astype(np.float64)).to(model.dtype)
            q = SparseTensor(n, coords, coded)
            recon = feature_reconstruct(q, ctx, km, model.recon[n])
            recons[n] = recon
            if n < max_level:
                ctx_feats = upsample_copy(recon, hier).feats
    return recons


def decode_pipeline(stream: LayeredBitstream, model: B2PModel,
                    max_level: int | None = None) -> GaussianSet:
    """Decode a layered stream into renderable splats at max_level."""
    cfg = model.config
    if max_level is None:
        max_level = min(stream.top_chunk_level, cfg.max_level)
    if max_level not in model.gauss:
        raise ConfigError(f"no generation head at level {max_level}; "
                          f"renderable levels are {list(cfg.render_levels)}")
    recons = decode_features(stream, model, max_level)
    with torch.no_grad():
        return gaussian_generate(recons[max_level], model)
