"""Central finite-difference check of backpropagated gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    analytic: Sequence[torch.Tensor] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    atol: float = 1e-7,
    floor: float = 1e-3,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a closure returning a scalar that depends on ``params``; the
    tensors are perturbed in place. The error for one coordinate is
    ``|g - fd| / max(|fd|, atol, floor * gmax)`` where ``gmax`` is the largest
    finite-difference magnitude seen; this keeps coordinates whose true
    gradient is ~0 (and whose difference quotient is pure roundoff) from
    dominating. ``analytic`` overrides the backprop
    gradient (for testing the harness itself). With ``max_coords`` only that
    many randomly chosen coordinates per tensor are differenced.
    """
    params = list(params)
    if analytic is None:
        loss = f()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    pairs = []
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.view(-1)
            gflat = g.reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = rng.choice(flat.numel(), size=max_coords, replace=False)
            for i in coords:
                old = flat[i].item()
                flat[i] = old + eps
                up = f().item()
                flat[i] = old - eps
                down = f().item()
                flat[i] = old
                pairs.append((gflat[i].item(), (up - down) / (2 * eps)))
    if not pairs:
        return 0.0
    gmax = max(abs(fd) for _, fd in pairs)
    return max(abs(g - fd) / max(abs(fd), atol, floor * gmax) for g, fd in pairs)


def module_grad_check(
    module: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    inputs: Sequence[torch.Tensor] = (),
    **kwargs,
) -> float:
    """grad_check over every trainable parameter of ``module`` plus ``inputs``."""
    params = [p for p in module.parameters() if p.requires_grad] + list(inputs)
    return grad_check(loss_fn, params, **kwargs)
