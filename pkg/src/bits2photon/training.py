"""Seeded end-to-end training: noise-proxy coding, multi-view splat rendering
against reference scenes, and Adam updates over all stage parameters.

Per-scene octree structure and kernel maps are fixed by the geometry, so they
are cached once; only features and losses are recomputed per iteration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as net
from .autograd import adam_step, backward, init_adam_state
from .errors import ConfigError, NumericError
from .losses import total_loss
from .render import Camera, GaussianSet, look_at, rasterize
from .sparse import build_kernel_map
from .voxel import PointCloud, build_hierarchy

CAMERA_RADIUS_FRAC = 1.8
CAMERA_ELEVATION = 0.45  # radians above the equatorial plane


@dataclass
class TrainConfig:
    lam: float = 10.0
    alpha: float = 3.0
    beta: float = 0.2
    gamma: float = 0.0
    lr: float = 1e-4
    batch: int = 4
    iters: int = 60000
    views_per_scene: int = 4
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lr < 0 or self.iters < 0:
            raise ConfigError("learning rate and iteration count must be nonnegative")
        if self.batch < 1 or self.views_per_scene < 1:
            raise ConfigError("batch and view counts must be at least 1")
        if self.image_size < 11:
            raise ConfigError("images must be at least 11 pixels for the SSIM window")


@dataclass
class Scene:
    """A training sample: the input cloud plus reference splats that define
    ground-truth renders."""

    cloud: PointCloud
    reference: GaussianSet
    _cache: dict = field(default_factory=dict, repr=False)


def sample_camera(rng: np.random.Generator, bit_depth: int, image_size: int,
                  azimuth: float | None = None) -> Camera:
    """A viewpoint on the fixed-radius circle around the grid center, with
    jittered azimuth."""
    center = np.full(3, 2.0 ** (bit_depth - 1))
    radius = CAMERA_RADIUS_FRAC * 2.0 ** (bit_depth - 1)
    az = rng.uniform(0.0, 2.0 * math.pi) if azimuth is None else azimuth
    eye = center + radius * np.array([
        math.cos(az) * math.cos(CAMERA_ELEVATION),
        math.sin(az) * math.cos(CAMERA_ELEVATION),
        math.sin(CAMERA_ELEVATION)])
    return look_at(eye, center, image_size, image_size)


def _scene_structures(scene: Scene, model: net.B2PModel):
    if not scene._cache:
        cfg = model.config
        hier = build_hierarchy(scene.cloud, cfg.base_level)
        kms = {n: build_kernel_map(hier.levels[n], hier.levels[n], 3, n)
               for n in cfg.coding_levels}
        scene._cache.update(hier=hier, kms=kms)
    return scene._cache["hier"], scene._cache["kms"]


def render_levels(scene: Scene, model: net.B2PModel, cameras) -> dict:
    """Noise-free renders of every render level for evaluation."""
    hier, kms = _scene_structures(scene, model)
    with torch.no_grad():
        pooled = net._feature_pyramid(model, hier, scene.cloud.colors)
        codes = net._code_levels(model, hier, pooled, kms)
        out = {}
        for m in model.config.render_levels:
            rec = codes[m - model.config.base_level]
            g = net.gaussian_generate(rec.recon, model)
            out[m] = [rasterize(g, cam).image for cam in cameras]
    return out


def _scene_loss(scene: Scene, model: net.B2PModel, cfg: TrainConfig,
                cameras, noise_gen):
    hier, kms = _scene_structures(scene, model)
    pooled = net._feature_pyramid(model, hier, scene.cloud.colors)
    codes = net._code_levels(model, hier, pooled, kms, noise_gen=noise_gen)
    with torch.no_grad():
        targets = [rasterize(scene.reference, cam).image for cam in cameras]
    renders = {}
    for m in model.config.render_levels:
        rec = codes[m - model.config.base_level]
        g = net.gaussian_generate(rec.recon, model)
        renders[m] = [(rasterize(g, cam).image, targets[i])
                      for i, cam in enumerate(cameras)]
    return total_loss(codes, renders, cfg.lam, cfg.alpha, cfg.beta, cfg.gamma)


def train(scenes: list, model: net.B2PModel, cfg: TrainConfig,
          log_path=None, progress=None) -> list:
    """Optimize the model in place; returns per-iteration loss history.

    Deterministic for a fixed seed. Divergence (a non-finite loss) aborts
    with the offending term named.
    """
    if not scenes:
        raise ConfigError("need at least one training scene")
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    params = model.named_parameters()
    state = init_adam_state(params)
    history = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["iter", "rate_bits", "l1_term", "ssim_term", "total"])
    try:
        for it in range(cfg.iters):
            picks = rng.integers(0, len(scenes), cfg.batch)
            loss = torch.zeros(())
            agg = {"rate_bits": 0.0, "l1_term": 0.0, "ssim_term": 0.0, "total": 0.0}
            for idx in picks:
                cameras = [sample_camera(rng, model.config.bit_depth, cfg.image_size)
                           for _ in range(cfg.views_per_scene)]
                scene_loss, parts = _scene_loss(scenes[idx], model, cfg,
                                                cameras, noise_gen)
                loss = loss + scene_loss
                for k in agg:
                    agg[k] += parts[k] / cfg.batch
            loss = loss / cfg.batch
            if not math.isfinite(float(loss)):
                bad = [k for k, v in agg.items() if not math.isfinite(v)]
                raise NumericError(
                    f"training diverged at iteration {it}: non-finite "
                    f"{', '.join(bad) if bad else 'loss'}")
            grads = backward(loss, params)
            adam_step(params, grads, state, cfg.lr)
            row = {"iter": it, **agg}
            history.append(row)
            if writer is not None:
                writer.writerow([it, agg["rate_bits"], agg["l1_term"],
                                 agg["ssim_term"], agg["total"]])
            if progress is not None:
                progress(row)
    finally:
        if log_file is not None:
            log_file.close()
    return history
