"""AdamW (optionally AMSGrad) and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch
from torch import Tensor


@dataclass
class OptimState:
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)
    max_exp_avg_sq: Optional[list[Tensor]] = None


@torch.no_grad()
def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[Tensor]],
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    amsgrad: bool = False,
) -> OptimState:
    """One in-place AdamW update with decoupled weight decay."""
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
        if amsgrad:
            state.max_exp_avg_sq = [torch.zeros_like(p) for p in params]
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2_sqrt = math.sqrt(1 - beta2**state.step)
    live = [i for i, g in enumerate(grads) if g is not None]
    if not live:
        return state
    ps = [params[i] for i in live]
    gs = [grads[i] for i in live]
    ms = [state.exp_avg[i] for i in live]
    vs = [state.exp_avg_sq[i] for i in live]
    # foreach kernels apply the same elementwise update as a per-tensor loop
    if weight_decay:
        torch._foreach_mul_(ps, 1 - lr * weight_decay)
    torch._foreach_lerp_(ms, gs, 1 - beta1)
    torch._foreach_mul_(vs, beta2)
    torch._foreach_addcmul_(vs, gs, gs, value=1 - beta2)
    if amsgrad:
        vmax = [state.max_exp_avg_sq[i] for i in live]
        torch._foreach_maximum_(vmax, vs)
        denom = torch._foreach_sqrt(vmax)
    else:
        denom = torch._foreach_sqrt(vs)
    torch._foreach_div_(denom, bc2_sqrt)
    torch._foreach_add_(denom, eps)
    torch._foreach_addcdiv_(ps, ms, denom, value=-lr / bc1)
    return state


class AdamW:
    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        amsgrad: bool = False,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.amsgrad = amsgrad
        self.state = OptimState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.lr if lr is None else lr,
            self.betas,
            self.eps,
            self.weight_decay,
            self.amsgrad,
        )


@dataclass(frozen=True)
class LrSchedule:
    lr0: float
    eta_min: float = 0.0
    T_0: float = 10
    T_mult: float = 1

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.lr0:
            raise ValueError("need 0 <= eta_min <= lr0")
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("need T_0 >= 1 and T_mult >= 1")


def _cycle(t: float, T_0: float, T_mult: float) -> tuple[float, float]:
    """Position inside the current cycle and that cycle's length."""
    if T_mult == 1:
        k = math.floor(t / T_0)
        return t - k * T_0, T_0

    def start(n):
        return T_0 * (T_mult**n - 1) / (T_mult - 1)

    n = int(math.floor(math.log(t / T_0 * (T_mult - 1) + 1, T_mult)))
    # guard against log rounding right at a restart
    while start(n + 1) <= t:
        n += 1
    while n > 0 and start(n) > t:
        n -= 1
    return t - start(n), T_0 * T_mult**n


def cosine_warm_restarts(t: float, sched: LrSchedule) -> float:
    """Learning rate at ``t`` epochs (fractional) under cosine annealing with restarts."""
    if t < 0:
        raise ValueError("t must be >= 0")
    t_cur, t_i = _cycle(float(t), sched.T_0, sched.T_mult)
    return sched.eta_min + (sched.lr0 - sched.eta_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2
