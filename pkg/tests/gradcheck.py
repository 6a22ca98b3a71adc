"""Finite-difference checks of model parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from vldecomp import core_math as cm


@dataclass
class GradCheck:
    worst: float  # max grad_mismatch ratio, <= 1 passes
    checked: int
    skipped: int  # coordinates whose stencil crosses a kink


def sampled_coords(shape, n, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return np.unravel_index(np.sort(flat), shape)


def triplet_signature(rt: torch.Tensor, rv: torch.Tensor, margin: float):
    """Hardest negatives and hinge activity: the pieces of the piecewise-smooth triplet loss."""
    s = cm.cosine_matrix(rt, rv)
    n = len(s)
    off = s.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    pos = s.diagonal()
    hard_t, arg_t = off.max(1)
    hard_v, arg_v = off.max(0)
    return (
        tuple(arg_t.tolist()),
        tuple(arg_v.tolist()),
        tuple((margin - pos + hard_t > 0).tolist()),
        tuple((margin - pos + hard_v > 0).tolist()),
    )


def check_param_grads(model, loss_fn, signature_fn=None, names=None, per_tensor=12, seed=0, h=cm.FD_STEP, rtol=1e-3):
    """Compare autograd with central differences on sampled parameter coordinates.

    ``loss_fn(model)`` returns a scalar tensor; the model should hold float64
    parameters. For piecewise-smooth losses ``signature_fn(model)`` returns
    the active piece; a coordinate whose +h or -h evaluation lands on a
    different piece is not differentiable across the stencil and is skipped.
    """
    rng = np.random.default_rng(seed)
    weights = model.named_weights()
    names = names or list(weights)
    grads = cm.backward(loss_fn(model), {n: weights[n] for n in names})
    with torch.no_grad():
        sig0 = signature_fn(model) if signature_fn else None
    worst, checked, skipped = 0.0, 0, 0
    for name in names:
        w = weights[name]
        base = w.detach().clone()
        coords = sampled_coords(tuple(w.shape), per_tensor, rng)
        for c in zip(*coords):
            crossed = False

            def f(x, c=c, base=base, name=name):
                nonlocal crossed
                with torch.no_grad():
                    v = base.clone()
                    v[c] = float(x[0])
                    weights[name].copy_(v)
                    out = loss_fn(model).item()
                    if signature_fn is not None and signature_fn(model) != sig0:
                        crossed = True
                    weights[name].copy_(base)
                return out

            numeric = cm.finite_diff_grad(f, [float(base[c])], h)
            if crossed:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, cm.grad_mismatch([float(grads[name][c])], numeric, rtol=rtol))
    return GradCheck(worst, checked, skipped)
