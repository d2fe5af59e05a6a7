from __future__ import annotations

from typing import Callable, Sequence

import torch
from torch import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` with respect to ``t`` (perturbed in place)."""
    g = torch.zeros_like(t)
    flat = t.data.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5, atol: float = 1e-7) -> float:
    """Largest relative error between autograd and central-difference gradients.

    For every tensor the error is ``|g_a - g_n|_2 / max(|g_a|_2, |g_n|_2)``;
    the maximum over tensors is returned. Tensors must be float64 leaves
    with ``requires_grad``. Tensors whose gradients are both below ``atol``
    in norm are skipped: a true zero gradient (a key bias under softmax,
    say) otherwise turns finite-difference noise into a relative error of 1.
    """
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("grad_check needs float64 tensors")
    analytic = torch.autograd.grad(fn(), list(tensors), allow_unused=True)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        ga = torch.zeros_like(t) if ga is None else ga
        gn = numeric_grad(fn, t, eps)
        denom = max(ga.norm().item(), gn.norm().item())
        if denom <= atol:
            continue
        worst = max(worst, (ga - gn).norm().item() / denom)
    return worst
