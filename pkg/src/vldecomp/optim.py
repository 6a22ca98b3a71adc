from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

from .errors import ContractError


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    weights: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Mapping[str, torch.Tensor]:
    """One AdamW update, in place.

    Decay is decoupled: ``w <- w * (1 - lr * wd)`` happens before the
    bias-corrected Adam step and never touches the moment estimates.
    Weights absent from ``grads`` are left alone.
    """
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        w = weights[name]
        if g.shape != w.shape:
            raise ContractError(f"gradient for {name} has shape {tuple(g.shape)}, weight {tuple(w.shape)}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(w)
            state.exp_avg_sq[name] = torch.zeros_like(w)
        v = state.exp_avg_sq[name]
        if m.shape != w.shape:
            raise ContractError(f"optimizer state for {name} does not match weight shape")
        g = g.to(w.dtype)
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        if weight_decay:
            w.mul_(1.0 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        w.addcdiv_(m, denom, value=-lr / bc1)
    return weights


