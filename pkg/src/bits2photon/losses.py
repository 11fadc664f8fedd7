"""Differentiable training losses: coding rate, image L1, single-scale SSIM,
and the combined multi-level rate-distortion objective.

The rate term mirrors the real coder: bin probability under the predicted
per-symbol Gaussian, floored at 2^-16 to match the 16-bit coder precision.
"""

from __future__ import annotations

import math

import torch

from .entropy import PROB_FLOOR, SIGMA_MIN
from .errors import ConfigError, DimensionError, NumericError

_SQRT2 = math.sqrt(2.0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ncdf(z: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(z / _SQRT2))


def rate_bits(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Total bits to code `x` (quantized or noise-proxied) under N(mu, sigma)
    with half-open unit bins; differentiable in all three arguments."""
    for name, t in (("x", x), ("mu", mu), ("sigma", sigma)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite rate-loss input: {name}")
    sigma = sigma.clamp_min(SIGMA_MIN)
    p = _ncdf((x + 0.5 - mu) / sigma) - _ncdf((x - 0.5 - mu) / sigma)
    return -torch.log2(p.clamp_min(PROB_FLOOR)).sum()


def l1_image_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels and channels."""
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def _gauss_kernel(dtype) -> torch.Tensor:
    half = SSIM_WINDOW // 2
    x = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean single-scale SSIM over an (H, W, C) image pair in [0, 1].

    11x11 Gaussian window (sigma 1.5), valid convolution, averaged over
    channels and window positions.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() != 3:
        raise DimensionError("expected (H, W, C) images")
    h, w, c = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"images must be at least {SSIM_WINDOW} pixels per side")
    kern = _gauss_kernel(pred.dtype)[None, None]
    x = pred.permute(2, 0, 1)[:, None]  # (C,1,H,W)
    y = target.permute(2, 0, 1)[:, None]
    mu_x = torch.nn.functional.conv2d(x, kern)
    mu_y = torch.nn.functional.conv2d(y, kern)
    xx = torch.nn.functional.conv2d(x * x, kern) - mu_x ** 2
    yy = torch.nn.functional.conv2d(y * y, kern) - mu_y ** 2
    xy = torch.nn.functional.conv2d(x * y, kern) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return (num / den).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(pred, target)


def total_loss(codes, renders: dict, lam: float, alpha: float = 3.0,
               beta: float = 0.2, gamma: float = 0.0, lpips_fn=None):
    """Multi-level objective: sum of per-level rate plus lam times the
    distortion summed over render levels and averaged over views.

    `codes` holds per-level records with (coded, mu, sigma); `renders` maps a
    render level to its list of (prediction, ground truth) view pairs. The
    perceptual term contributes only when a callable hook is supplied.

    Returns (loss, parts) with detached part values in bits/unitless form.
    """
    if lam < 0 or alpha < 0 or beta < 0 or gamma < 0:
        raise ConfigError("loss weights must be nonnegative")
    rate = sum((rate_bits(rec.coded, rec.mu, rec.sigma) for rec in codes),
               torch.zeros(()))
    l1_total = torch.zeros(())
    ssim_total = torch.zeros(())
    lpips_total = torch.zeros(())
    n_views = 0
    for level in sorted(renders):
        for pred, target in renders[level]:
            l1_total = l1_total + alpha * l1_image_loss(pred, target)
            ssim_total = ssim_total + beta * ssim_loss(pred, target)
            if lpips_fn is not None and gamma > 0:
                lpips_total = lpips_total + gamma * lpips_fn(pred, target)
            n_views += 1
    views_per_level = max(n_views // max(len(renders), 1), 1)
    dist = (l1_total + ssim_total + lpips_total) / views_per_level
    loss = rate + lam * dist
    parts = {"rate_bits": float(rate), "l1_term": float(l1_total) / views_per_level,
             "ssim_term": float(ssim_total) / views_per_level,
             "lpips_term": float(lpips_total) / views_per_level,
             "total": float(loss)}
    return loss, parts
