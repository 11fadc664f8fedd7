"""Reverse-mode gradient plumbing and the Adam optimizer.

Gradients come from torch's tape; `backward` packages them as a name -> grad
map with exact zeros for parameters the loss does not reach, which keeps the
optimizer update total and deterministic.
"""

from __future__ import annotations

import math

import torch

from .errors import DimensionError


def backward(loss: torch.Tensor, params: dict) -> dict:
    """Gradient of a scalar loss w.r.t. every named parameter."""
    if loss.dim() != 0:
        raise DimensionError("loss must be a scalar")
    names = sorted(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names],
                                allow_unused=True, retain_graph=False)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


def init_adam_state(params: dict) -> dict:
    return {"t": 0,
            "m": {n: torch.zeros_like(p) for n, p in params.items()},
            "v": {n: torch.zeros_like(p) for n, p in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """In-place bias-corrected Adam update; returns the mutated state."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    with torch.no_grad():
        for name in sorted(params):
            g = grads[name]
            m = state["m"][name].mul_(b1).add_(g, alpha=1 - b1)
            v = state["v"][name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            params[name].sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state
